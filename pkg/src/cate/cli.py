"""Command-line entry points: gen-space, pretrain, encode, search, compare, report.

Exit status: 0 on success, 2 on a configuration error, 1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .benchmark import BenchmarkOracle, RecordTable, SyntheticBenchmark
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ENCODING_ALGORITHMS, ConfigError, ExperimentConfig, build_config, load_config, sample_cells
from .encodings import CATE_BI, CATE_UNI, encode_many, write_encodings
from .pretrain import pretrain
from .report import emit_report, format_table, meta_path, write_trajectory
from .search import CandidateUniverse, run_search
from .space import ArchRecord, compute_attribute, read_records, write_records

log = logging.getLogger("cate")

# --------------------------------------------------------------- run context


class Context:
    """Everything a search run needs, built once per process."""

    def __init__(self, cfg: ExperimentConfig, schemes: list[str]):
        self.cfg = cfg
        self.table = None
        if cfg.benchmark["records"]:
            records = read_records(cfg.benchmark["records"])
            self.table = RecordTable(records)
            cells = [r.cell for r in records]
            seen, uniq = set(), []
            for c in cells:
                if c not in seen:
                    seen.add(c)
                    uniq.append(c)
            cells = uniq
        else:
            cells = sample_cells(cfg.space, cfg.search["universe_size"], cfg.search["universe_seed"])
        self.cells = cells
        weights = load_weights(cfg) if any(s in (CATE_UNI, CATE_BI) for s in schemes) else None
        self.universes = {s: CandidateUniverse(cells, encode_many(s, cells, cfg.space, weights)) for s in schemes}
        self.plain = CandidateUniverse(cells, hashes=next(iter(self.universes.values())).hashes
                                       if self.universes else [])

    def oracle(self) -> BenchmarkOracle:
        if self.table is not None:
            return BenchmarkOracle(self.table, None, "records")
        return BenchmarkOracle(SyntheticBenchmark(self.cfg.space, self.cfg.benchmark["seed"]), None, "synthetic")

    def run(self, algorithm: str, scheme: str | None, seed: int):
        s = self.cfg.search
        kwargs: dict = {}
        if algorithm == "rea":
            kwargs = {"population": s["population"], "tournament": s["tournament"]}
        elif algorithm == "local-latent":
            kwargs = {"k": s["k"]}
        elif algorithm in ("dngo", "mlp", "cate-dngo-ls"):
            kwargs = {"init": s["init"], "top_k": s["top_k"], "epochs": s["predictor_epochs"]}
        universe = self.universes[scheme] if scheme else self.plain
        traj = run_search(algorithm, self.oracle(), self.cfg.space, s["budget"], seed, universe, **kwargs)
        traj.algorithm = tag(algorithm, scheme)
        return traj


def tag(algorithm: str, scheme: str | None) -> str:
    return f"{algorithm}/{scheme}" if scheme else algorithm


def load_weights(cfg: ExperimentConfig):
    path = cfg.checkpoint_path
    if not path.exists():
        raise ConfigError(f"search.checkpoint: {path} does not exist (run `pretrain` first or set the path)")
    try:
        weights, _ = load_checkpoint(path, expected_vocab=cfg.space.vocab)
    except CheckpointError as e:
        raise ConfigError(f"search.checkpoint: {e}") from None
    return weights


_WORKER: Context | None = None


def _init_worker(raw: dict, schemes: list[str]) -> None:
    global _WORKER
    _WORKER = Context(build_config(raw), schemes)


def _work(job):
    return _WORKER.run(*job)


def run_jobs(cfg: ExperimentConfig, jobs: list[tuple], schemes: list[str], out_root: Path, resume: bool) -> list[Path]:
    """Run (algorithm, scheme, seed) jobs, skipping finished ones under --resume; one writer."""
    paths = {job: out_root / tag(job[0], job[1]).replace("/", "__") / f"seed-{job[2]:04d}.jsonl" for job in jobs}
    todo = [j for j in jobs if not (resume and paths[j].exists() and meta_path(paths[j]).exists())]
    if len(todo) < len(jobs):
        log.info("resume: %d of %d runs already on disk", len(jobs) - len(todo), len(jobs))
    if todo:
        if cfg.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(cfg.raw, schemes)) as ex:
                for job, traj in zip(todo, ex.map(_work, todo)):
                    write_trajectory(traj, paths[job])
        else:
            ctx = Context(cfg, schemes)
            for job in todo:
                write_trajectory(ctx.run(*job), paths[job])
    return [paths[j] for j in jobs]


# ------------------------------------------------------------------ commands


def _dataset(cfg: ExperimentConfig):
    if cfg.data["path"]:
        return [r.cell for r in read_records(cfg.data["path"])]
    ds = cfg.out / "dataset.jsonl"
    if ds.exists():
        return [r.cell for r in read_records(ds)]
    return sample_cells(cfg.data_space, cfg.data["num_cells"], cfg.data["seed"])


def cmd_gen_space(cfg: ExperimentConfig, args) -> int:
    path = cfg.out / "dataset.jsonl"
    if args.resume and path.exists():
        return 0
    cells = sample_cells(cfg.data_space, cfg.data["num_cells"], cfg.data["seed"])
    bench = SyntheticBenchmark(cfg.space, cfg.benchmark["seed"])
    write_records(path, [ArchRecord(c, bench(c), compute_attribute(c, cfg.space.vocab, cfg.space.attribute))
                         for c in cells])
    print(f"wrote {len(cells)} cells to {path}")
    return 0


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    ck = cfg.out / "checkpoint.npz"
    if args.resume and ck.exists():
        return 0
    cells = _dataset(cfg)
    if max(c.n for c in cells) > cfg.encoder.max_nodes:
        raise ConfigError(f"data: cells exceed encoder max_nodes {cfg.encoder.max_nodes}")
    res = pretrain(cells, cfg.space, cfg.pair, cfg.corruption, cfg.encoder, cfg.train,
                   cfg.out / "metrics.jsonl", cfg.out / "timing.jsonl")
    save_checkpoint(res.weights, ck, cfg.space.vocab, {"best_epoch": res.best_epoch, "diverged": res.diverged})
    last = res.metrics[-1]
    print(f"pretrain: best epoch {res.best_epoch}, final train loss {last.train_loss:.4f}, "
          f"held-out masked accuracy {last.heldout_masked_acc:.4f}; checkpoint {ck}")
    return 0 if not res.diverged else 1


def cmd_encode(cfg: ExperimentConfig, args) -> int:
    schemes = args.scheme or [cfg.search["encoding"]]
    ctx = Context(cfg, schemes)
    for s in schemes:
        path = cfg.out / "encodings" / f"{s}.jsonl"
        write_encodings(path, ctx.cells, s, ctx.universes[s].encodings)
        print(f"wrote {len(ctx.cells)} {s} encodings to {path}")
    return 0


def _check_algorithms(cfg: ExperimentConfig, algorithms) -> None:
    if cfg.benchmark["records"]:
        bad = [a for a in algorithms if a in ("rea", "local")]
        if bad:
            raise ConfigError(f"search.algorithms: {bad} make edit moves outside a record table; "
                              "use a synthetic benchmark")


def cmd_search(cfg: ExperimentConfig, args) -> int:
    algs = cfg.search["algorithms"]
    _check_algorithms(cfg, algs)
    scheme = cfg.search["encoding"]
    schemes = [scheme] if any(a in ENCODING_ALGORITHMS for a in algs) else []
    if scheme in (CATE_UNI, CATE_BI) and schemes:
        load_weights(cfg)
    jobs = [(a, scheme if a in ENCODING_ALGORITHMS else None, s) for a in algs for s in cfg.seeds]
    paths = run_jobs(cfg, jobs, schemes, cfg.out / "trajectories", args.resume)
    print(f"search: {len(paths)} trajectories under {cfg.out / 'trajectories'}")
    return 0


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    schemes = list(cfg.compare["schemes"])
    algs = list(cfg.compare["algorithms"])
    _check_algorithms(cfg, algs)
    if any(s in (CATE_UNI, CATE_BI) for s in schemes):
        load_weights(cfg)
    jobs = [(a, s if a in ENCODING_ALGORITHMS else None, seed)
            for a in algs for s in (schemes if a in ENCODING_ALGORITHMS else [None]) for seed in cfg.seeds]
    paths = run_jobs(cfg, jobs, schemes, cfg.out / "compare", args.resume)
    summaries = emit_report(paths, cfg.out / "compare" / "report", args.allow_ragged)
    print(format_table(summaries), end="")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    paths = [Path(p) for p in args.paths] if args.paths else sorted(
        p for p in (cfg.out / "trajectories").rglob("*.jsonl") if not p.name.endswith(".meta.json"))
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"report: missing trajectory files {missing}")
    if not paths:
        raise ConfigError(f"report: no trajectory files under {cfg.out / 'trajectories'}")
    summaries = emit_report(paths, cfg.out / "report", args.allow_ragged)
    print(format_table(summaries), end="")
    return 0


COMMANDS = {"gen-space": cmd_gen_space, "pretrain": cmd_pretrain, "encode": cmd_encode,
            "search": cmd_search, "compare": cmd_compare, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cate", description="Computation-aware cell encodings for architecture search.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed-list", help="seeds, e.g. 0-49 or 0,3,7")
        sp.add_argument("--budget", type=int, help="query budget per search run")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--resume", action="store_true", help="skip artifacts already on disk")
        sp.add_argument("--allow-ragged", action="store_true", help="allow mixed budgets in reports")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. search.budget=50")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "encode":
            sp.add_argument("--scheme", action="append", help="encoding scheme(s) to dump")
        if name == "report":
            sp.add_argument("paths", nargs="*", help="trajectory files (default: all under OUT/trajectories)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed_list is not None:
        overrides.append(f"search.seeds={args.seed_list!r}" if "-" in args.seed_list or "," in args.seed_list
                         else f"search.seeds=[{args.seed_list}]")
    if args.budget is not None:
        overrides.append(f"search.budget={args.budget}")
    if args.out is not None:
        overrides.append(f"out={args.out!r}")
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
