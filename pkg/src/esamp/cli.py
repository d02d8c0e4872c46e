"""``esamp`` command line: decode, bench, ablate-noise, verify, metrics.

Every command writes ``manifest.json`` next to its outputs.  Outputs are
deterministic given (config, seed, build) apart from wall-clock fields, which
live only in the manifest, the timing sidecar and the benchmark report.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import metrics
from .config import RunConfig, load_config
from .errors import ConfigError, EsampError, InputError

MANIFEST_SCHEMA = "esamp.manifest/1"
MANIFEST_NAME = "manifest.json"


def build_id() -> str:
    """Hash of the package sources; identical builds give identical ids."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    build: str
    seed: int
    started: str
    finished: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, config: dict, seed: int) -> "RunManifest":
        return cls(command, config, metrics.config_hash(config), build_id(), seed, _now())

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps({"schema": MANIFEST_SCHEMA, **asdict(self)}, indent=2, sort_keys=True) + "\n")
        return path


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps({**obj, "manifest": MANIFEST_NAME}, indent=2, sort_keys=True) + "\n")


def _overrides(args) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("backbone", "beta", "k", "prompts", "max_new_tokens", "scope", "pipeline", "seed", "filter",
                "placement", "ablation"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "vanilla", False):
        out["esamp"] = False
        out["beta"] = 0.0
    if getattr(args, "trace_vectors", False):
        out["trace_vectors"] = True
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands ----------------------------------------------------------------------

def cmd_decode(args) -> int:
    from .harness import make_session, run

    cfg = _config(args)
    out = _out_dir(args)
    man = RunManifest.start("decode", cfg.to_dict(), cfg.seed)
    traces, timing, gens = out / "traces.jsonl", out / "timing.jsonl", out / "generations.json"
    session = make_session(cfg, trace_path=traces, timing_path=timing)
    res = run(session)
    _write_json(gens, {"tokens": res.tokens, "events": res.events})
    man.outputs = {"traces": traces.name, "timing": timing.name, "generations": gens.name}
    man.info = {"sequences": session.n_sequences, "prompts": len(session.prompts),
                "distiller_states": len(res.scope.states) if res.scope else 0,
                "distiller_updates": res.distiller_updates, "rows_trained": res.rows_trained,
                "tokens": sum(len(t) for t in res.tokens)}
    man.write(out)
    print(f"decoded {session.n_sequences} sequences -> {out}")
    return 0


def cmd_bench(args) -> int:
    from .harness import benchmark

    cfg = _config(args)
    out = _out_dir(args)
    man = RunManifest.start("bench", cfg.to_dict(), cfg.seed)
    rep = benchmark(cfg, warmup=args.warmup, reps=args.reps)
    _write_json(out / "bench.json", rep)
    man.outputs = {"report": "bench.json"}
    man.write(out)
    for m, r in rep["modes"].items():
        print(f"{m:8s} median {r['median_s']:.4f}s  {r['tokens_per_s']:.1f} tok/s  overhead {r['overhead_pct']:+.2f}%")
    for note in rep["notes"]:
        print(note)
    return 0


def cmd_ablate_noise(args) -> int:
    from .harness import noise_ablation, synthetic_config

    cfg = synthetic_config()
    if args.config is not None or _overrides(args):
        cfg = load_config(args.config, {**{k: v for k, v in cfg.to_dict().items() if v is not None},
                                        **_overrides(args)})
    out = _out_dir(args)
    seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    man = RunManifest.start("ablate-noise", {**cfg.to_dict(), "seeds": seeds}, seeds[0])
    rep = noise_ablation(cfg, seeds)
    curves = rep.pop("curves")
    _write_json(out / "ablation.json", rep)
    metrics.write_series_csv(out / "divergence.csv", curves)
    man.outputs = {"report": "ablation.json", "divergence_curves": "divergence.csv"}
    man.write(out)
    cm = rep["coverage_mean"]
    print(f"coverage vanilla {cm['vanilla']:.3f}  esamp {cm['esamp']:.3f}  noise {cm['noise']:.3f}")
    ci = rep["ci_noise_minus_vanilla"]
    print(f"noise - vanilla {ci['mean_diff']:+.3f} [{ci['lo']:+.3f}, {ci['hi']:+.3f}]")
    return 0


def cmd_verify(args) -> int:
    from . import sampler
    from .verify import run_verify_suite

    out = _out_dir(args)
    config = {"seed": args.seed, "problems": args.problems, "mdps": args.mdps, "inject_fault": args.inject_fault}
    man = RunManifest.start("verify", config, args.seed)
    sampler.set_fault_injection(args.inject_fault)
    try:
        rep = run_verify_suite(seed=args.seed, n_problems=args.problems, n_mdps=args.mdps)
    finally:
        sampler.set_fault_injection(False)
    _write_json(out / "verify.json", rep)
    man.outputs = {"report": "verify.json"}
    man.info = {"passed": rep["passed"]}
    man.write(out)
    for c in rep["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    return 0 if rep["passed"] else 1


def read_traces(paths: Sequence[str | Path]) -> list[dict]:
    """Parse JSONL trace files; malformed lines raise InputError naming file and line."""
    recs = []
    for path in paths:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
                for key in ("seq", "step", "prompt", "token", "logp_ref"):
                    if key not in rec:
                        raise InputError(f"{path}:{lineno}: trace record lacks {key!r}")
                rec["_where"] = f"{path}:{lineno}"
                recs.append(rec)
    return recs


def traces_to_hidden(recs: list[dict]) -> tuple[np.ndarray, list[int], list[list[int]]]:
    """Stack logged ``hL`` vectors into ``[n_seq, T, d]`` (NaN where absent)."""
    seqs = sorted({r["seq"] for r in recs})
    index = {s: i for i, s in enumerate(seqs)}
    T = max(r["step"] for r in recs) + 1
    d = None
    for r in recs:
        if "vectors" not in r or "hL" not in r["vectors"]:
            raise InputError(f"{r['_where']}: trace lacks vectors.hL; decode with trace_vectors=true")
        d = len(r["vectors"]["hL"])
    hidden = np.full((len(seqs), T, d), np.nan)
    tokens: list[list[int]] = [[] for _ in seqs]
    prompt_of = [0] * len(seqs)
    for r in sorted(recs, key=lambda r: (r["seq"], r["step"])):
        i = index[r["seq"]]
        hidden[i, r["step"]] = r["vectors"]["hL"]
        tokens[i].append(r["token"])
        prompt_of[i] = r["prompt"]
    return hidden, prompt_of, tokens


def metrics_from_traces(recs: list[dict], correct_token: int | None = None) -> tuple[dict, dict, list[str]]:
    """Per-prompt diversity metrics; returns (values, csv series, notices)."""
    hidden, prompt_of, tokens = traces_to_hidden(recs)
    notices = []
    values: dict[str, Any] = {"sequences": len(tokens),
                              "self_nll_per_token": metrics.self_nll_per_token([r["logp_ref"] for r in recs])}
    series: dict[str, list[float]] = {}
    per_prompt = []
    for p in sorted(set(prompt_of)):
        rows = [i for i, q in enumerate(prompt_of) if q == p]
        entry: dict[str, Any] = {"prompt": p, "sequences": len(rows)}
        emb = metrics.generation_embeddings(hidden[rows])
        nonempty = int(np.sum(np.linalg.norm(emb, axis=1) > 0))
        if nonempty < 2:
            notices.append(f"prompt {p}: fewer than two sequences, pairwise metrics skipped")
        else:
            entry["pairwise_cosine"] = metrics.pairwise_cosine_mean(emb)
            entry["vendi"] = metrics.vendi_score(emb)
            series[f"divergence_p{p}"] = metrics.divergence_curve(hidden[rows])
        if correct_token is not None:
            n = len(rows)
            c = sum(correct_token in tokens[i] for i in rows)
            entry["correct"] = c
            entry["pass_at_k"] = {str(k): metrics.pass_at_k(n, c, k) for k in range(1, n + 1)}
        per_prompt.append(entry)
    values["per_prompt"] = per_prompt
    return values, series, notices


def cmd_metrics(args) -> int:
    out = _out_dir(args)
    config = {"traces": [str(p) for p in args.traces], "correct_token": args.correct_token}
    man = RunManifest.start("metrics", config, 0)
    recs = read_traces(args.traces)
    if not recs:
        raise InputError("no trace records")
    values, series, notices = metrics_from_traces(recs, args.correct_token)
    report = metrics.metrics_report(values, [], config)
    report["notices"] = notices
    _write_json(out / "metrics.json", report)
    man.outputs = {"report": "metrics.json"}
    if series:
        metrics.write_series_csv(out / "divergence.csv", series)
        man.outputs["divergence_curves"] = "divergence.csv"
    man.write(out)
    for n in notices:
        print(n)
    for e in values["per_prompt"]:
        if "pairwise_cosine" in e:
            print(f"prompt {e['prompt']}: similarity {e['pairwise_cosine']:.4f}  vendi {e['vendi']:.4f}")
    return 0


# parser ------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value lines, or JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--backbone", choices=("tiny", "synthetic"))
    p.add_argument("--beta", type=float)
    p.add_argument("--k", type=int, help="samples per prompt")
    p.add_argument("--prompts", type=int, help="number of prompts")
    p.add_argument("--max-new-tokens", "--T", dest="max_new_tokens", type=int)
    p.add_argument("--scope", choices=("shared", "per-prompt"))
    p.add_argument("--pipeline", choices=("sync", "async"))
    p.add_argument("--seed", type=int)
    p.add_argument("--filter", help="none | top-k:N | top-p:P | min-p:P")
    p.add_argument("--placement", choices=("latent-mix", "post-filter"))
    p.add_argument("--ablation", choices=("off", "matched-noise"))
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="esamp", description="Exploratory sampling with an online latent distiller.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="run a decode session and write traces, generations and a manifest")
    _add_run_flags(p)
    p.add_argument("--vanilla", action="store_true", help="plain sampling: no distiller, beta 0")
    p.add_argument("--trace-vectors", action="store_true", help="log logits, hL and latent error per step")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="tokens/sec for vanilla, sync ESamp and async ESamp")
    _add_run_flags(p)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-noise", help="vanilla vs true-error vs matched-noise on the synthetic model")
    _add_run_flags(p)
    p.add_argument("--seeds", type=int, default=20, help="number of paired seeds")
    p.add_argument("--seed-start", type=int, default=0)
    p.set_defaults(func=cmd_ablate_noise)

    p = sub.add_parser("verify", help="run the numerical verification suite")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--problems", type=int, default=200)
    p.add_argument("--mdps", type=int, default=40)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("metrics", help="diversity metrics and divergence curves from decode traces")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--correct-token", type=int, help="a sequence counts as correct if it emits this token")
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"esamp {args.command}: {exc}", file=sys.stderr)
        return 2
    except EsampError as exc:
        print(f"esamp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
