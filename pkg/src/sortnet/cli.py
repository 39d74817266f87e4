"""Command-line entry point: ``sortnet {train|ablate|gradcheck|bench|surface}``.

Exit codes: 0 success, 1 failed check or diverged run, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sortnet.errors import DivergedLoss, SortNetError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
NETS = ("lenet", "resnet", "vggish", "mlp")
DATASETS = ("cifar10", "blobs", "xor")


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    """Everything needed to rebuild a run: network, fusion, data and optimizer settings."""

    net: str = "lenet"
    star: bool = False
    sort: bool = False
    width: int = 1
    blocks: int = 3
    depth: Optional[int] = None
    batchnorm: bool = False
    hidden: int = 16
    fusion: Optional[dict] = None
    data: str = "blobs"
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    data_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    out: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def fusion_spec(self):
        from sortnet.fusion import FusionSpec

        return FusionSpec.from_dict(self.fusion) if self.fusion else None

    def network(self):
        from sortnet.netbuild import build_network

        fusion = self.fusion_spec()
        if self.net == "lenet":
            kw = dict(star=self.star, sort=self.sort, fusion=fusion)
        elif self.net == "resnet":
            kw = dict(n_blocks_per_stage=self.blocks, width=self.width, sort=self.sort, fusion=fusion)
        elif self.net == "vggish":
            kw = dict(depth=self.depth or 10, star=self.star, sort=self.sort, fusion=fusion, batchnorm=self.batchnorm)
        elif self.net == "mlp":
            kw = dict(hidden=self.hidden, depth=self.depth or 1, star=self.star, sort=self.sort, fusion=fusion)
        else:
            raise UsageError(f"unknown network {self.net!r}; choose from {', '.join(NETS)}")
        if self.net != "mlp" and self.data != "cifar10":
            raise UsageError(f"--net {self.net} needs image data (--data cifar10)")
        if self.net == "mlp" and self.data == "cifar10":
            raise UsageError("--net mlp takes 2-D synthetic data (--data blobs or xor)")
        return build_network(self.net, **kw)

    def train_config(self, seed: int):
        from sortnet.train import TrainConfig

        return TrainConfig.from_dict({"sections": [(1e-2, 100)], **self.train, "seed": seed})

    def datasets(self):
        from sortnet.data import load_dataset

        return load_dataset(self.data, self.subset, self.test_subset, self.data_seed)


def _run_one(cfg_dict: dict, seed: int, csv_path: Optional[str]) -> dict:
    """Train one seed; returns a picklable record (used directly and by worker processes)."""
    from sortnet.train import train

    cfg = ExperimentConfig.from_dict(cfg_dict)
    train_set, test_set = cfg.datasets()
    tcfg = cfg.train_config(seed)
    try:
        m = train(cfg.network(), train_set, tcfg, test_set)
        diverged, iteration = False, None
    except DivergedLoss as exc:
        m, diverged, iteration = exc.metrics, True, exc.iteration
    if csv_path:
        m.write_csv(csv_path)
    return {
        "seed": seed,
        "diverged": diverged,
        "diverged_at": iteration,
        "final_test_error": None if diverged else m.final_test_error,
        "final_train_loss": m.train_loss[-1] if m.train_loss else None,
        "iters": len(m.iters),
        "elapsed_s": m.elapsed[-1] if m.elapsed else 0.0,
    }


def _run_many(jobs: list[tuple[dict, int, Optional[str]]], n_workers: int) -> list[dict]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_run_one(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(_run_one, *j) for j in jobs]
        return [f.result() for f in futures]


def _summary(name: str, records: list[dict], cfg: dict) -> str:
    lines = [f"run: {name}", f"config: {json.dumps(cfg, sort_keys=True)}"]
    errs = []
    for r in records:
        if r["diverged"]:
            lines.append(f"seed {r['seed']}: diverged at iteration {r['diverged_at']} (-)")
        else:
            errs.append(r["final_test_error"])
            lines.append(f"seed {r['seed']}: final_train_loss={r['final_train_loss']:.4f} test_error_pct={r['final_test_error']:.2f}")
    if errs:
        lines.append(f"test_error_pct: {np.mean(errs):.2f} ± {np.std(errs):.2f} (n={len(errs)})")
    else:
        lines.append("test_error_pct: - (all runs diverged)")
    return "\n".join(lines) + "\n"


# -- argument handling ---------------------------------------------------------------


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; its values override the flags below")
    p.add_argument("--net", choices=NETS, default="lenet")
    p.add_argument("--star", action="store_true", help="replace convs with two-branch blocks")
    p.add_argument("--sort", action="store_true", help="add the second-order product term")
    p.add_argument("--width", type=int, default=1)
    p.add_argument("--blocks", type=int, default=3, help="residual blocks per stage")
    p.add_argument("--depth", type=int, help="conv layers of the vggish net (default 10) or hidden layers of the mlp (default 1)")
    p.add_argument("--batchnorm", action="store_true", help="batchnorm in the vggish net")
    p.add_argument("--hidden", type=int, default=16, help="hidden units of the mlp")
    p.add_argument("--fusion", help="explicit fusion terms, e.g. sum+prod or max")
    p.add_argument("--wrapper", choices=("identity", "sqrt_eps"), help="product-term wrapper")
    p.add_argument("--gate", choices=("none", "relu_both"), help="product-term input gate")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--data", choices=DATASETS, default="blobs")
    p.add_argument("--subset", type=int, help="training samples (random subset)")
    p.add_argument("--test-subset", type=int, help="test samples (random subset)")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated seeds, one run each")
    p.add_argument("--sections", help="LR sections as lr:iters[,lr:iters...]")
    p.add_argument("--scale", type=float, help="use the network family's reference schedule scaled by this factor")
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--augment", action="store_true", help="pad-crop-flip augmentation for image data")
    p.add_argument("--jobs", type=int, default=1, help="runs executed in parallel")
    p.add_argument("--out", default="runs")


def _parse_terms(text: str) -> tuple[bool, bool, bool]:
    terms = {t.strip() for t in text.replace(",", "+").split("+") if t.strip()}
    bad = terms - {"sum", "max", "prod"}
    if bad or not terms:
        raise UsageError(f"bad fusion {text!r}; use terms from sum, max, prod joined by '+'")
    return "sum" in terms, "max" in terms, "prod" in terms


def _family(net: str) -> str:
    return {"mlp": "lenet"}.get(net, net)


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    from sortnet.fusion import BRANCH_SORT, FusionSpec, residual_spec
    from sortnet.train import TrainConfig, parse_sections, scaled_schedule

    try:
        if args.sections:
            sections = parse_sections(args.sections)
        elif args.scale:
            sections = scaled_schedule(_family(args.net), args.scale)
        else:
            sections = [(1e-2, 100)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fusion = None
    if args.fusion or args.wrapper or args.gate:
        base = residual_spec(args.eps) if args.net == "resnet" else BRANCH_SORT
        d = base.to_dict()
        if args.fusion:
            d.update(zip(("use_sum", "use_max", "use_prod"), _parse_terms(args.fusion)))
        elif args.net != "resnet" and not args.sort:
            d["use_prod"] = False
        if args.wrapper:
            d["prod_wrapper"] = args.wrapper
        if args.gate:
            d["prod_input_gate"] = args.gate
        d["eps"] = args.eps
        try:
            fusion = FusionSpec(**d).to_dict()
        except (SortNetError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    tcfg = TrainConfig(sections, args.batch_size, args.momentum, args.weight_decay, 0, args.eval_every, args.augment).to_dict()
    tcfg.pop("seed")
    cfg = ExperimentConfig(
        net=args.net, star=args.star, sort=args.sort, width=args.width, blocks=args.blocks, depth=args.depth,
        batchnorm=args.batchnorm, hidden=args.hidden, fusion=fusion, data=args.data, subset=args.subset,
        test_subset=args.test_subset, data_seed=args.data_seed, seeds=args.seeds, train=tcfg, out=args.out,
    )
    if args.config:
        try:
            override = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **override})
    return cfg


def _check_config(cfg: ExperimentConfig) -> None:
    """Resolve network and optimizer settings up front so mistakes are usage errors."""
    try:
        cfg.network()
        cfg.train_config(0)
    except UsageError:
        raise
    except (SortNetError, ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def cmd_train(args) -> int:
    cfg = experiment_from_args(args)
    _check_config(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True))
    print(f"config: {json.dumps(echo, sort_keys=True)}")
    try:
        records = _run_many([(echo, s, str(out / f"seed{s}.csv")) for s in cfg.seeds], args.jobs)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = _summary(cfg.network().name, records, echo)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    if any(r["diverged"] for r in records) and not args.allow_diverge:
        print("error: at least one run diverged (pass --allow-diverge to accept)", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def ablation_configs(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """The seven fusion rows, each as a full config differing only in ``fusion``."""
    from sortnet.fusion import BRANCH_SORT, FusionSpec, ablation_rows, residual_spec

    if cfg.fusion:
        base = FusionSpec.from_dict(cfg.fusion)
    else:
        base = residual_spec() if cfg.net == "resnet" else BRANCH_SORT
    rows = []
    for spec in ablation_rows(base):
        d = cfg.to_dict()
        d.update(fusion=spec.to_dict(), star=cfg.net != "resnet", sort=False)
        rows.append((spec.label, d))
    return rows


def format_ablation(results: list[tuple[str, list[dict]]]) -> str:
    lines = [f"{'+':>3} {'max':>3} {'prod':>4}  {'error_pct':>10}  runs"]
    for label, recs in results:
        terms = label.split("+")
        marks = ["x" if t in terms else "" for t in ("sum", "max", "prod")]
        ok = [r["final_test_error"] for r in recs if not r["diverged"]]
        err = "-" if not ok or len(ok) < len(recs) else f"{np.mean(ok):.2f}"
        lines.append(f"{marks[0]:>3} {marks[1]:>3} {marks[2]:>4}  {err:>10}  {len(ok)}/{len(recs)}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = experiment_from_args(args)
    _check_config(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_configs(cfg)
    jobs, keys = [], []
    for label, d in rows:
        row_dir = out / label.replace("+", "_")
        row_dir.mkdir(exist_ok=True)
        (row_dir / "config.json").write_text(json.dumps(d, indent=1, sort_keys=True))
        print(f"row {label}: {json.dumps(d['fusion'], sort_keys=True)}")
        for s in cfg.seeds:
            jobs.append((d, s, str(row_dir / f"seed{s}.csv")))
            keys.append(label)
    try:
        records = _run_many(jobs, args.jobs)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    results = [(label, [r for k, r in zip(keys, records) if k == label]) for label, _ in rows]
    table = format_ablation(results)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps({label: recs for label, recs in results}, indent=1))
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from sortnet.gradcheck import run_suite

    report = run_suite(args.scope, instances=args.instances, seed=args.seed)
    print("\n".join(report.lines()))
    if not report.passed:
        print(f"failing ops: {', '.join(report.failing)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(args) -> int:
    from sortnet.bench import bench_block

    if args.reps < 30:
        raise UsageError("--reps must be at least 30")
    res = bench_block(args.block, args.channels, args.size, args.batch, args.reps, seed=args.seed)
    print("\n".join(res.lines()))
    return EXIT_OK


def cmd_surface(args) -> int:
    from sortnet.fusion import grid_axis, nonlinearity_surface, write_surface_csv

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        axis = grid_axis(args.lo, args.hi, args.step)
        for which in ("f1", "f2"):
            path = write_surface_csv(out / f"{which}.csv", nonlinearity_surface(which, axis))
            print(f"wrote {path} ({axis.size ** 2} rows)")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from sortnet.gradcheck import scopes

    parser = argparse.ArgumentParser(prog="sortnet", description="Second-order response transform experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network for one or more seeds")
    _add_experiment_args(p)
    p.add_argument("--allow-diverge", action="store_true", help="exit 0 even if a run diverges")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the seven fusion-strategy rows")
    _add_experiment_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("scope", choices=list(scopes()))
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time a SORT block against its linear-sum twin")
    p.add_argument("--block", choices=("residual", "branch"), default="residual")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("surface", help="write the f1/f2 response-transform surfaces as CSV")
    p.add_argument("--out", default="surfaces")
    p.add_argument("--lo", type=float, default=-2.0)
    p.add_argument("--hi", type=float, default=2.0)
    p.add_argument("--step", type=float, default=0.05)
    p.set_defaults(func=cmd_surface)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sortnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
