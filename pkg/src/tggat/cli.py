"""``tggat`` command line: gen, train, eval, gradcheck, report.

Exit codes: 0 success, 64 usage, 2 I/O, 3 numeric failure, 4 checkpoint/config
incompatibility, 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, restore_params, save_checkpoint
from .config import Config, ConfigError, load_config
from .env import GenerationError, generate_dataset
from .io import DataError, read_dataset, write_dataset
from .language import Vocabulary, paraphrase_instruction

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT, EXIT_GRADCHECK = 0, 64, 2, 3, 4, 5

# fields that change parameter shapes; a checkpoint only fits a config that agrees on them
ARCH_FIELDS = ("d_model", "n_heads", "n_mhca_layers", "n_text_layers", "n_gat_layers", "ffn_mult",
               "max_text_len", "max_steps", "grid")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path, command: str, cfg: Config | None, seeds: dict, inputs, outputs, started: float):
    path = Path(path)
    outputs = [Path(p) for p in outputs]
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "hashes": {str(p): _sha256(p) for p in outputs if p.is_file()},
        "duration_s": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _config(path) -> Config:
    if path is None:
        return Config()
    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
    except (ConfigError, TypeError) as exc:
        raise CliError(EXIT_USAGE, f"bad config: {exc}") from None


def _dataset(path, cfg: Config):
    try:
        worlds, episodes, meta = read_dataset(path, cfg.env)
    except (FileNotFoundError, OSError) as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except (DataError, GenerationError, ValueError, KeyError) as exc:
        raise CliError(EXIT_USAGE, f"bad dataset: {exc}") from None
    if not episodes:
        raise CliError(EXIT_USAGE, f"dataset {path} has no episodes")
    return worlds, episodes, meta


def metric_record(report, **extra) -> dict:
    """Machine record in reporting units: SPL and SR in percent, GP in metres."""
    return {"spl": 100.0 * report.spl, "sr": 100.0 * report.sr, "gp": report.gp,
            "n_episodes": report.n_episodes, **extra}


def format_table(rows) -> str:
    """Aligned text table of (name, spl, sr, gp) rows."""
    width = max([len("run")] + [len(r[0]) for r in rows])
    lines = [f"{'run':<{width}}  {'SPL':>8}  {'SR':>8}  {'GP':>9}"]
    for name, spl, sr, gp in rows:
        lines.append(f"{name:<{width}}  {spl:8.2f}  {sr:8.2f}  {gp:9.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.time()
    if args.worlds <= 0 or args.episodes <= 0:
        raise CliError(EXIT_USAGE, "--worlds and --episodes must be positive")
    cfg = _config(args.config)
    worlds, episodes = generate_dataset(args.worlds, args.episodes, args.seed, cfg.env)
    if args.paraphrase:
        expanded = []
        for ep in episodes:
            expanded.append(ep)
            expanded.extend(ep.with_instruction(text) for text in paraphrase_instruction(ep.instruction))
        episodes = expanded
    meta = {"worlds": args.worlds, "episodes": args.episodes, "seed": args.seed,
            "paraphrase": bool(args.paraphrase), "augment": bool(args.augment), "records": len(episodes)}
    out = Path(args.out)
    try:
        written = write_dataset(out, worlds, episodes, meta)
        write_manifest(out / "manifest.json", "gen", cfg, {"seed": args.seed}, [], written, started)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    print(f"wrote {len(episodes)} episodes over {len(worlds)} worlds to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import NonFiniteLossError, train
    started = time.time()
    cfg = _config(args.config)
    worlds, episodes, meta = _dataset(args.data, cfg)
    if args.val:
        vworlds, val, _ = _dataset(args.val, cfg)
        worlds = {**worlds, **vworlds}
    else:
        n_val = max(1, len(episodes) // 10) if len(episodes) > 1 else 0
        episodes, val = episodes[:len(episodes) - n_val], episodes[len(episodes) - n_val:]
    resume = None
    if args.resume:
        resume = _load_ckpt(args.resume)
        _check_compatible(resume.config, cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_fh = open(metrics_path, "a")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from None

    def on_eval(record):
        rec = {"iteration": record["iteration"], "spl": 100.0 * record["spl"], "sr": 100.0 * record["sr"],
               "gp": record["gp"], "n_episodes": record["n_episodes"]}
        metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        metrics_fh.flush()
        print(f"iter {rec['iteration']}: SPL {rec['spl']:.2f} SR {rec['sr']:.2f} GP {rec['gp']:.2f}")

    try:
        result = train(cfg, worlds, episodes, Vocabulary.default(), val_episodes=val, resume=resume,
                       iterations=args.iterations, augment=bool(meta.get("augment", False)), on_eval=on_eval)
    except NonFiniteLossError as exc:
        dump = out / "diverged.json"
        dump.write_text(json.dumps(exc.dump, indent=2, sort_keys=True) + "\n")
        write_manifest(out / "manifest.json", "train", cfg, {"seed": cfg.seed}, [args.data], [dump, metrics_path],
                       started)
        print(f"error: {exc}; state dumped to {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        metrics_fh.close()
    best = result.best or result.last
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"
    save_checkpoint(result.last, last_path)
    save_checkpoint(best, best_path)
    write_manifest(out / "manifest.json", "train", cfg, {"seed": cfg.seed}, [args.data] + ([args.val] if args.val else []),
                   [last_path, best_path, metrics_path], started)
    print(f"trained to iteration {result.last.iteration}; best checkpoint at iteration {best.iteration}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint: {exc}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_COMPAT, f"unusable checkpoint: {exc}") from None


def _check_compatible(saved: Config, cfg: Config):
    diff = [f for f in ARCH_FIELDS if getattr(saved, f) != getattr(cfg, f)]
    if diff:
        raise CliError(EXIT_COMPAT, f"checkpoint/config mismatch in {', '.join(diff)}")


def cmd_eval(args) -> int:
    from .trainer import ModelPolicy, OraclePolicy, RandomPolicy, build_model, evaluate
    started = time.time()
    ckpt = None
    if args.oracle or args.random:
        cfg = _config(args.config)
        policy_name = "oracle" if args.oracle else "random"
    else:
        if not args.checkpoint:
            raise CliError(EXIT_USAGE, "--checkpoint is required unless --oracle or --random is given")
        ckpt = _load_ckpt(args.checkpoint)
        cfg = ckpt.config
        if args.config:
            _check_compatible(ckpt.config, _config(args.config))
        policy_name = "model"
    worlds, episodes, _ = _dataset(args.data, cfg)
    vocab = Vocabulary.default()
    if args.oracle:
        policy = OraclePolicy()
    elif args.random:
        policy = RandomPolicy(cfg, seed=args.seed)
    else:
        model = build_model(cfg, vocab)
        try:
            restore_params(model, ckpt)
        except CheckpointError as exc:
            raise CliError(EXIT_COMPAT, str(exc)) from None
        policy = ModelPolicy(model, vocab, cfg)
    report = evaluate(policy, episodes, worlds, cfg)
    record = metric_record(report, policy=policy_name, seed=args.seed,
                           checkpoint=str(args.checkpoint) if ckpt is not None else None)
    print(format_table([(policy_name, record["spl"], record["sr"], record["gp"])]))
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(record, sort_keys=True) + "\n")
        inputs = [args.data] + ([args.checkpoint] if ckpt is not None else [])
        write_manifest(out.with_name(out.name + ".manifest.json"), "eval", cfg, {"seed": args.seed},
                       inputs, [out], started)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import COMPONENTS, format_report, run_gradcheck, tiny_config
    started = time.time()
    if args.corrupt is not None and args.corrupt not in COMPONENTS:
        raise CliError(EXIT_USAGE, f"--corrupt must be one of {', '.join(COMPONENTS)}")
    results = run_gradcheck(seed=args.seed, corrupt=args.corrupt)
    print(format_report(results))
    ok = all(r.passed for r in results)
    out = Path(args.out)
    record = {"passed": ok, "seed": args.seed,
              "components": {r.name: {"max_rel_err": r.worst, "passed": bool(r.passed), "offending": r.offenders}
                             for r in results}}
    try:
        out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        write_manifest(out.with_name(out.name + ".manifest.json"), "gradcheck", tiny_config(args.seed),
                       {"seed": args.seed}, [], [out], started)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    if not ok:
        bad = [f"{r.name} ({', '.join(r.offenders)})" for r in results if not r.passed]
        print("gradient check FAILED: " + "; ".join(bad), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _read_record(run: Path) -> dict:
    """Metric record of a run: a record file, a run directory's eval.json, or
    the last line of its metrics.jsonl."""
    candidates = [run] if run.is_file() else [run / "eval.json", run / "metrics.jsonl"]
    for path in candidates:
        if path.is_file():
            lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
            if not lines:
                continue
            try:
                rec = json.loads(lines[-1])
                return {k: float(rec[k]) for k in ("spl", "sr", "gp")}
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(EXIT_USAGE, f"bad metrics record in {path}: {exc}") from None
    raise CliError(EXIT_IO, f"no metrics file for run {run}")


def cmd_report(args) -> int:
    started = time.time()
    rows = []
    for run in args.runs:
        rec = _read_record(Path(run))
        rows.append((str(run), rec["spl"], rec["sr"], rec["gp"]))
    print(format_table(rows))
    out = Path(args.out)
    try:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "SPL", "SR", "GP"])
            for name, spl, sr, gp in rows:
                w.writerow([name, repr(spl), repr(sr), repr(gp)])
        write_manifest(out.with_name(out.name + ".manifest.json"), "report", None, {}, args.runs, [out], started)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tggat", description="Dialog-guided aerial navigation agent with a graph-aware transformer.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic worlds and episodes")
    g.add_argument("--worlds", type=int, required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--paraphrase", action="store_true", help="add 5 rewrites of every instruction")
    g.add_argument("--augment", action="store_true", help="mark the dataset for image augmentation in training")
    g.add_argument("--config", help="config file (environment fields are used)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--val", help="held-out dataset (default: last 10%% of --data)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--iterations", type=int, help="iterations to run (default: max_iterations)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a baseline policy")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="config to check the checkpoint against (or to use for baselines)")
    e.add_argument("--seed", type=int, default=0)
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--oracle", action="store_true", help="follow the oracle instead of a model")
    mode.add_argument("--random", action="store_true", help="random-walk baseline")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every component")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="gradcheck.json")
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="tabulate metric records of several runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"tggat {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
