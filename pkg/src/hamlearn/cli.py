"""Command-line entry point: ``hamlearn <command> [options]``.

Every option can also come from a JSON file passed with ``--config``; flags
given on the command line win over the file, and the file wins over the
built-in defaults. The resolved configuration is written into each output
artifact. Timestamps go only to the ``.log`` file written next to the output.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import bijection, spectral
from ._rng import derive_seed
from .dataset import (
    CASES,
    DatasetFile,
    ObservationMode,
    OmegaHistory,
    data_dir,
    generate_dataset,
    parse_case,
    parse_size,
)
from .estimator import EdgeDistanceRegressor
from .exceptions import ConfigurationError, ContractError, HamlearnError
from .lattice import C6_DEFAULT, DISORDER_DEFAULT_UM, SPACING_DEFAULT_UM, build_geometry, couplings
from .sampler import sample_bitstrings
from .training import (
    MetricsReport,
    TrainConfig,
    curves_to_csv,
    evaluate_extrapolation,
    group_by_size,
    replicate_seeds,
    train_replicates,
)

logger = logging.getLogger("hamlearn")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DEFAULTS: Dict[str, dict] = {
    "gen": {
        "sizes": "3x3,3x4,4x4",
        "count": 100,
        "case": 3,
        "mode": "exact",
        "snapshot_budget": "equal",
        "seed": 0,
        "jobs": 1,
        "format": "binary",
        "per_omega_graphs": False,
        "omegas": None,
        "spacing": SPACING_DEFAULT_UM,
        "disorder": DISORDER_DEFAULT_UM,
        "delta": 0.0,
        "c6": C6_DEFAULT,
        "out": None,
    },
    "train": {
        "data": None,
        "val": None,
        "test": [],
        "case": None,
        "epochs": 550,
        "batch_size": 32,
        "replicates": 1,
        "model": "gnn",
        "target_mode": "nn",
        "lr_start": 5e-3,
        "lr_end": 2.5e-4,
        "weight_decay": 1e-2,
        "validation_fraction": 0.1,
        "seed": 0,
        "jobs": 1,
        "out": None,
    },
    "eval": {"checkpoint": [], "data": [], "sizes": None, "out": None},
    "sample": {
        "size": "3x3",
        "omega": 10.0,
        "delta": 0.0,
        "spacing": SPACING_DEFAULT_UM,
        "disorder": DISORDER_DEFAULT_UM,
        "c6": C6_DEFAULT,
        "basis": "zx",
        "n_samples": 10000,
        "seed": 0,
        "out": None,
    },
    "phase-diagram": {
        "size": "4x4",
        "omegas": "0:100:5",
        "spacings": "7:12:1",
        "delta": 0.0,
        "disorder": 0.0,
        "c6": C6_DEFAULT,
        "seed": 0,
        "jobs": 1,
        "out": None,
    },
    "verify-bijection": {
        "n": 4,
        "topology": None,
        "trials": 100,
        "omega": 1.0,
        "delta": 0.0,
        "sampling": "physical",
        "j_tol": 1e-3,
        "c_floor": 1e-8,
        "seed": 0,
        "out": None,
    },
    "invert": {"target": None, "omega": None, "delta": 0.0, "init": None, "tol": 1e-12, "max_iter": 200, "out": None},
}


# -- parsing helpers ------------------------------------------------------------


def _case_arg(text):
    try:
        return parse_case(text)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _size_list(text) -> List[tuple]:
    if isinstance(text, (list, tuple)):
        return [parse_size(s) for s in text]
    return [parse_size(s) for s in str(text).split(",") if s.strip()]


def _float_grid(text) -> List[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    text = str(text)
    if ":" in text:
        try:
            start, stop, step = (float(t) for t in text.split(":"))
        except ValueError:
            raise ConfigurationError(f"grid {text!r} must be start:stop:step") from None
        if step <= 0 or stop < start:
            raise ConfigurationError(f"bad grid {text!r}")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + k * step for k in range(n)]
    return [float(t) for t in text.split(",") if t.strip()]


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the ``--config`` file, overridden by flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigurationError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigurationError(f"unknown {command} config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _output(cfg: dict, default_name: str) -> Path:
    out = Path(cfg["out"]) if cfg.get("out") else data_dir() / default_name
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _attach_log(path: Path):
    """Sidecar log next to ``path``; the only place timestamps appear."""
    handler = logging.FileHandler(str(path) + ".log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("hamlearn").addHandler(handler)
    return handler


def _jsonable(cfg: dict) -> dict:
    return json.loads(json.dumps(cfg, default=str))


# -- commands -------------------------------------------------------------------


def cmd_generate(cfg: dict) -> int:
    case = parse_case(cfg["case"])
    sizes = _size_list(cfg["sizes"])
    mode = ObservationMode.parse(cfg["mode"], cfg["snapshot_budget"])
    omega = OmegaHistory(tuple(_float_grid(cfg["omegas"]))) if cfg["omegas"] else OmegaHistory.default()
    if cfg["format"] not in ("binary", "jsonl-full"):
        raise ConfigurationError(f"unknown format {cfg['format']!r}")
    if int(cfg["count"]) < 1:
        raise ConfigurationError("count must be >= 1")
    out = _output(cfg, f"case{case}_{str(mode).replace(':', '-')}_seed{cfg['seed']}.jsonl")
    handler = _attach_log(out)
    try:
        logger.info("generating %s", json.dumps(_jsonable(cfg), sort_keys=True))
        ds = generate_dataset(
            sizes,
            int(cfg["count"]),
            omega=omega,
            case=case,
            mode=mode,
            master_seed=int(cfg["seed"]),
            spacing_um=float(cfg["spacing"]),
            disorder_amplitude_um=float(cfg["disorder"]),
            delta=float(cfg["delta"]),
            c6=float(cfg["c6"]),
            jobs=int(cfg["jobs"]),
            per_omega_graphs=bool(cfg["per_omega_graphs"]),
        )
        ds.manifest["run_config"] = _jsonable(cfg)
        ds.save(out, fmt=cfg["format"])
        logger.info("wrote %d graphs to %s", len(ds), out)
    finally:
        logging.getLogger("hamlearn").removeHandler(handler)
        handler.close()
    print(f"{len(ds)} graphs -> {out}")
    return EXIT_OK


def _load_dataset(path, what: str) -> DatasetFile:
    if not path:
        raise ConfigurationError(f"{what} dataset path is required")
    return DatasetFile.load(path)


def cmd_train(cfg: dict) -> int:
    train_ds = _load_dataset(cfg["data"], "training")
    case = parse_case(cfg["case"]) if cfg["case"] is not None else train_ds.case
    if case != train_ds.case:
        raise ContractError(f"dataset {cfg['data']} holds case {train_ds.case}, not case {case}")
    val_ds = DatasetFile.load(cfg["val"]) if cfg["val"] else None
    tests = [DatasetFile.load(p) for p in ([cfg["test"]] if isinstance(cfg["test"], str) else cfg["test"])]
    config = TrainConfig(
        case=case,
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
        lr_start=float(cfg["lr_start"]),
        lr_end=float(cfg["lr_end"]),
        weight_decay=float(cfg["weight_decay"]),
        target_mode=cfg["target_mode"],
        model=cfg["model"],
        validation_fraction=float(cfg["validation_fraction"]),
    )
    k = int(cfg["replicates"])
    if k < 1:
        raise ConfigurationError("replicates must be >= 1")
    seeds = [config.seed] if k == 1 else replicate_seeds(config.seed, k)
    out = _output(cfg, f"train_case{case}_{config.model}_seed{config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(out / "train")
    try:
        logger.info("training %s", json.dumps(_jsonable(cfg), sort_keys=True))
        results, failures = train_replicates(config, seeds, train_ds, val_ds, int(cfg["jobs"]))
        train_sizes = [f"{r}x{c}" for r, c in sorted({g.size for g in train_ds.graphs})]
        extra = {"case": case, "training_sizes": train_sizes, "run_config": _jsonable(cfg)}
        for r, res in enumerate(results):
            rdir = out / f"replicate_{r}"
            res.model.save(rdir / "checkpoint", extra=dict(extra, replicate=r, seed=res.model.random_state))
            (rdir / "loss_curves.csv").write_text(curves_to_csv(res.curves))
            logger.info("replicate %d: final train loss %.6g", r, res.curves[-1]["train_loss"])
        for f in failures:
            logger.error("replicate with seed %s failed: %s", f["seed"], f["error"])
        if tests and results:
            test_sets: Dict[str, list] = {}
            for ds in tests:
                if ds.case != case:
                    raise ContractError(f"test dataset holds case {ds.case}, not case {case}")
                for size, graphs in group_by_size(ds).items():
                    test_sets.setdefault(size, []).extend(graphs)
            report = evaluate_extrapolation([r.model for r in results], test_sets, train_sizes, config.to_json())
            report.failures = failures
            report.write(out / "metrics")
            print(report.to_csv(), end="")
    finally:
        logging.getLogger("hamlearn").removeHandler(handler)
        handler.close()
    print(f"{len(results)}/{k} replicate(s) trained -> {out}")
    return EXIT_OK if not failures else EXIT_FAILURE


def _checkpoint_dirs(paths) -> List[Path]:
    out = []
    for p in [paths] if isinstance(paths, str) else paths:
        p = Path(p)
        if (p / "manifest.json").exists():
            out.append(p)
        else:
            found = sorted(q.parent for q in p.glob("replicate_*/checkpoint/manifest.json"))
            if not found:
                raise ConfigurationError(f"no checkpoint found under {p}")
            out.extend(found)
    return out


def cmd_eval(cfg: dict) -> int:
    dirs = _checkpoint_dirs(cfg["checkpoint"])
    if not dirs:
        raise ConfigurationError("at least one --checkpoint is required")
    models = [EdgeDistanceRegressor.load(d) for d in dirs]
    cases = {m.checkpoint_extra_.get("case") for m in models}
    if len(cases) != 1:
        raise ContractError(f"checkpoints disagree on the case: {sorted(map(str, cases))}")
    case = cases.pop()
    wanted = {f"{r}x{c}" for r, c in _size_list(cfg["sizes"])} if cfg["sizes"] else None
    test_sets: Dict[str, list] = {}
    for path in [cfg["data"]] if isinstance(cfg["data"], str) else cfg["data"]:
        ds = DatasetFile.load(path)
        if case is not None and ds.case != case:
            raise ContractError(f"checkpoint was trained on case {case} but {path} holds case {ds.case}")
        for size, graphs in group_by_size(ds).items():
            if wanted is None or size in wanted:
                test_sets.setdefault(size, []).extend(graphs)
    if not test_sets:
        raise ConfigurationError("no test graphs match the requested sizes")
    if wanted:
        missing = wanted - set(test_sets)
        if missing:
            raise ConfigurationError(f"no test graphs for sizes {sorted(missing)}")
    train_sizes = models[0].checkpoint_extra_.get("training_sizes", [])
    report = evaluate_extrapolation(models, test_sets, train_sizes, {"checkpoints": [str(d) for d in dirs]})
    out = _output(cfg, "eval_metrics")
    report.write(out)
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    rows, cols = parse_size(cfg["size"])
    basis = str(cfg["basis"]).upper()
    if basis not in ("Z", "X", "ZX"):
        raise ConfigurationError(f"basis must be z, x or zx, got {cfg['basis']!r}")
    n = int(cfg["n_samples"])
    if n < 1:
        raise ConfigurationError("n_samples must be >= 1")
    seed = int(cfg["seed"])
    geom = build_geometry(rows, cols, float(cfg["spacing"]), float(cfg["disorder"]), derive_seed(seed, "geometry"))
    _, psi = spectral.ground_state(couplings(geom, float(cfg["c6"])), float(cfg["omega"]), float(cfg["delta"]))
    out = _output(cfg, f"snapshots_{rows}x{cols}_seed{seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "geometry.json").write_text(geom.dumps())
    (out / "config.json").write_text(json.dumps(_jsonable(cfg), indent=2, sort_keys=True))
    for b in basis:
        snaps = sample_bitstrings(psi, b, n, derive_seed(seed, "snapshot", b))
        snaps.save(out / f"snapshots_{b}.hlss")
    print(f"{n} snapshot(s) per basis {basis} -> {out}")
    return EXIT_OK


def cmd_phase_diagram(cfg: dict) -> int:
    rows, cols = parse_size(cfg["size"])
    omegas = _float_grid(cfg["omegas"])
    spacings = _float_grid(cfg["spacings"])
    if not omegas or not spacings:
        raise ConfigurationError("omega and spacing grids must be non-empty")
    points = spectral.phase_diagram(
        rows,
        cols,
        omegas,
        spacings,
        delta=float(cfg["delta"]),
        disorder_amplitude_um=float(cfg["disorder"]),
        seed=int(cfg["seed"]),
        c6=float(cfg["c6"]),
        jobs=int(cfg["jobs"]),
    )
    out = _output(cfg, f"phase_diagram_{rows}x{cols}.csv")
    rows_out = [[_fmt(p.omega), _fmt(p.spacing_um), _fmt(p.order_parameter)] for p in points]
    out.write_text(_csv_text(["omega_rad_per_us", "spacing_um", "order_parameter"], rows_out))
    out.with_suffix(".config.json").write_text(json.dumps(_jsonable(cfg), indent=2, sort_keys=True))
    for a in spacings:
        ys = [p.order_parameter for p in points if p.spacing_um == a]
        print(f"a = {a:g} um: order parameter crosses 0.5 at omega = {spectral.crossing(omegas, ys):.4g} rad/us")
    print(f"{len(points)} grid points -> {out}")
    return EXIT_OK


def cmd_verify_bijection(cfg: dict) -> int:
    if float(cfg["omega"]) == 0:
        print(
            "refused: the coupling-correlation bijection needs a nonzero transverse field. At omega = 0 the "
            "ground state is classical and does not depend on the coupling magnitudes.",
            file=sys.stderr,
        )
        return EXIT_USAGE
    n = int(cfg["n"])
    topology = cfg["topology"] or "chain"
    report = bijection.verify_injectivity(
        n,
        topology,
        int(cfg["trials"]),
        float(cfg["omega"]),
        float(cfg["delta"]),
        rng=derive_seed(int(cfg["seed"]), "bijection"),
        sampling=cfg["sampling"],
        j_tol=float(cfg["j_tol"]),
        c_floor=float(cfg["c_floor"]),
    )
    out = _output(cfg, f"bijection_n{n}_omega{cfg['omega']}.json")
    payload = dict(report.to_json(), run_config=_jsonable(cfg))
    out.write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(report.summary_table())
    return EXIT_OK if report.ok else EXIT_FAILURE


def _read_matrix(path, key: str) -> np.ndarray:
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, dict):
        for k in (key, "matrix"):
            if k in obj:
                obj = obj[k]
                break
        else:
            raise ConfigurationError(f"{path} has no {key!r} entry")
    return np.asarray(obj, dtype=np.float64)


def cmd_invert(cfg: dict) -> int:
    if cfg["target"] is None or cfg["omega"] is None:
        raise ConfigurationError("--target and --omega are required")
    if float(cfg["omega"]) == 0:
        print("refused: inversion needs a nonzero transverse field", file=sys.stderr)
        return EXIT_USAGE
    c = _read_matrix(cfg["target"], "c")
    j0 = _read_matrix(cfg["init"], "j_rad_per_us") if cfg["init"] else None
    res = bijection.invert_correlators(
        c, float(cfg["omega"]), float(cfg["delta"]), j_init=j0, tol=float(cfg["tol"]), max_iter=int(cfg["max_iter"])
    )
    out = _output(cfg, "recovered_couplings.json")
    out.write_text(json.dumps(dict(res.to_json(), run_config=_jsonable(cfg)), indent=2, sort_keys=True))
    print(f"converged in {res.iterations} iteration(s), residual {res.residual:.3e} -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "phase-diagram": cmd_phase_diagram,
    "verify-bijection": cmd_verify_bijection,
    "invert": cmd_invert,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamlearn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--out", help="output path (default: under $HAMLEARN_DATA_DIR)")
        return p

    p = add("gen", "generate a ground-state dataset")
    p.add_argument("--sizes", help="comma-separated RxC list, e.g. 3x3,3x4")
    p.add_argument("--count", type=int, help="disorder realizations per size")
    p.add_argument("--case", type=_case_arg, help=f"feature case, one of {CASES}")
    p.add_argument("--mode", help="exact or snapshot:N[:z|zx]")
    p.add_argument("--snapshot-budget", choices=("equal", "split"), help="N per basis, or N shared between Z and X")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--format", choices=("binary", "jsonl-full"))
    p.add_argument("--per-omega-graphs", action="store_true", default=None, help="one graph per omega value")
    p.add_argument("--omegas", help="omega history, start:stop:step or comma list (rad/us)")
    p.add_argument("--spacing", type=float, help="lattice spacing (um)")
    p.add_argument("--disorder", type=float, help="position disorder amplitude (um)")
    p.add_argument("--delta", type=float, help="detuning (rad/us)")
    p.add_argument("--c6", type=float, help="C6 coefficient (rad um^6 / us)")

    p = add("train", "train edge-distance models")
    p.add_argument("--data", help="training dataset")
    p.add_argument("--val", help="validation dataset (default: split off the training set)")
    p.add_argument("--test", nargs="+", help="datasets to evaluate after training")
    p.add_argument("--case", type=_case_arg)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--model", choices=("gnn", "mlp-baseline"))
    p.add_argument("--target-mode", choices=("nn", "nn+nnn"))
    p.add_argument("--lr-start", type=float)
    p.add_argument("--lr-end", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)

    p = add("eval", "evaluate checkpoints, including on unseen sizes")
    p.add_argument("--checkpoint", nargs="+", help="checkpoint directories or training output directories")
    p.add_argument("--data", nargs="+", help="test datasets")
    p.add_argument("--sizes", help="restrict to these sizes, e.g. 4x5,5x5")

    p = add("sample", "draw measurement snapshots from one ground state")
    p.add_argument("--size")
    p.add_argument("--omega", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--spacing", type=float)
    p.add_argument("--disorder", type=float)
    p.add_argument("--c6", type=float)
    p.add_argument("--basis", help="z, x or zx")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)

    p = add("phase-diagram", "order parameter over an (omega, spacing) grid")
    p.add_argument("--size")
    p.add_argument("--omegas", help="start:stop:step or comma list (rad/us)")
    p.add_argument("--spacings", help="start:stop:step or comma list (um)")
    p.add_argument("--delta", type=float)
    p.add_argument("--disorder", type=float)
    p.add_argument("--c6", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)

    p = add("verify-bijection", "check that correlations determine couplings")
    p.add_argument("--n", type=int, help="number of spins")
    p.add_argument("--topology", help="chain or RxC")
    p.add_argument("--trials", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sampling", choices=("physical", "uniform"))
    p.add_argument("--j-tol", type=float)
    p.add_argument("--c-floor", type=float)
    p.add_argument("--seed", type=int)

    p = add("invert", "recover couplings from a correlation matrix")
    p.add_argument("--target", help="JSON file with the <SzSz> matrix (list or {'c': ...})")
    p.add_argument("--omega", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--init", help="JSON file with initial couplings")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.getLogger("hamlearn").setLevel(logging.INFO)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        print(f"hamlearn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HamlearnError, OSError) as exc:
        print(f"hamlearn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
