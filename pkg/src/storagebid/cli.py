"""Command-line front end.

Every command reads one JSON config (storage, net, loss, training,
sensitivity sections) plus CSV data paths, and writes its outputs to a run
directory together with a manifest (config hash, seeds, versions, input
digests) that suffices to reproduce the run.

Exit codes: 0 success, 1 validation error, 2 solver non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .bids import anchored_bid_curve, compute_theta_segments, form_bids
from .domain import (
    LOOKBACK_INTERVALS,
    SensitivityModel,
    StorageParams,
    ValidationError,
    read_price_csv,
    soc_grid,
    validate_storage_params,
    write_price_csv,
)
from .gradcheck import jacobian_check, loss_gradient_check
from .loss import LossConfig
from .pipeline import TrainConfig, backtest, build_dataset, compare_reports, train_decision_focused
from .predictor import NetSpec, load_checkpoint, pretrain_mse, save_checkpoint
from .qp import SolverError
from .synth import synthetic_price_series

__all__ = ["main", "run"]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path: str) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if "storage" not in cfg:
        raise ValidationError("config is missing the 'storage' section")
    return cfg


def _storage(cfg: dict) -> StorageParams:
    return validate_storage_params(StorageParams(**cfg["storage"]))


def _sensitivity(cfg: dict) -> SensitivityModel:
    sec = cfg.get("sensitivity", {"kind": "price_taker"})
    return SensitivityModel(kind=sec.get("kind", "price_taker"), alpha=sec.get("alpha", 0.0))


def _net_spec(cfg: dict, input_dim: int, horizon: int) -> NetSpec:
    sec = cfg.get("net", {})
    layers = sec.get("layers")
    if layers is None:
        hidden = sec.get("hidden", [128, 128])
        layers = [input_dim, *hidden, horizon]
    return NetSpec(layers=tuple(layers), seed=sec.get("seed", cfg.get("seed", 0)))


def _loss_cfg(cfg: dict) -> LossConfig:
    sec = cfg.get("loss", {})
    return LossConfig(
        epsilon=sec.get("epsilon", 1.0),
        num_samples=sec.get("num_samples", 1),
        rng_seed=sec.get("rng_seed", cfg.get("seed", 0)),
    )


def _train_cfg(cfg: dict) -> TrainConfig:
    sec = cfg.get("train", {})
    return TrainConfig(
        epochs=sec.get("epochs", 20),
        batch_size=sec.get("batch_size", 32),
        lr=sec.get("lr", 1e-4),
        seed=sec.get("seed", cfg.get("seed", 0)),
        workers=cfg.get("workers", 0),
    )


def _write_manifest(out_dir: Path, command: str, cfg_path, data_paths, extra=None) -> None:
    manifest = {
        "command": command,
        "created": datetime.now().isoformat(timespec="seconds"),
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    if cfg_path is not None:
        canonical = json.dumps(_load_config(cfg_path), sort_keys=True).encode()
        manifest["config_path"] = str(cfg_path)
        manifest["config_sha256"] = hashlib.sha256(canonical).hexdigest()
    manifest["inputs"] = {str(p): _sha256(Path(p)) for p in data_paths if p}
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _cmd_synth(args) -> int:
    series = synthetic_price_series(days=args.days, seed=args.seed)
    write_price_csv(series, args.out)
    print(f"wrote {len(series)} intervals to {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    series = read_price_csv(args.data)
    if args.out:
        write_price_csv(series, args.out)
    print(
        f"ok: {len(series)} intervals at {series.step}, channels {','.join(series.channels)}"
    )
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    params = _storage(cfg)
    series = read_price_csv(args.data)
    horizon = cfg.get("horizon", 24)
    dataset = build_dataset(series, params, horizon=horizon, stride=cfg.get("stride", 1))
    input_dim = dataset[0].features.x.size
    spec = _net_spec(cfg, input_dim, horizon)
    sec = cfg.get("pretrain", {})
    result = pretrain_mse(
        dataset,
        spec,
        epochs=sec.get("epochs", 50),
        batch_size=sec.get("batch_size", 32),
        lr=sec.get("lr", 1e-3),
        seed=sec.get("seed", cfg.get("seed", 0)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.weights, out / "pretrained.ckpt")
    with open(out / "pretrain_loss.csv", "w") as fh:
        fh.write("epoch,mse\n")
        for k, v in enumerate(result.losses):
            fh.write(f"{k},{v!r}\n")
    _write_manifest(out, "pretrain", args.config, [args.data],
                    {"final_mse": result.losses[-1], "samples": len(dataset)})
    print(f"pretrained {spec.layers} on {len(dataset)} samples, final mse {result.losses[-1]:.4f}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    params = _storage(cfg)
    sens = _sensitivity(cfg)
    series = read_price_csv(args.data)
    horizon = cfg.get("horizon", 24)
    dataset = build_dataset(
        series, params, horizon=horizon, stride=cfg.get("stride", 1), sens=sens
    )
    w0, adam = load_checkpoint(args.weights)
    result = train_decision_focused(
        dataset, w0, params, _loss_cfg(cfg), _train_cfg(cfg), sens=sens
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.weights, out / "df.ckpt", adam=result.adam)
    with open(out / "train_loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for k, v in enumerate(result.loss_trace):
            fh.write(f"{k},{v!r}\n")
    _write_manifest(out, "train", args.config, [args.data, args.weights],
                    {"degenerate_rows": result.degenerate_count, "samples": len(dataset)})
    print(
        f"trained {len(result.loss_trace)} epochs on {len(dataset)} samples, "
        f"loss {result.loss_trace[0]:.3f} -> {result.loss_trace[-1]:.3f}, "
        f"{result.degenerate_count} degenerate rows"
    )
    return 0


def _cmd_bid(args) -> int:
    cfg = _load_config(args.config)
    params = _storage(cfg)
    series = read_price_csv(args.data)
    horizon = cfg.get("horizon", 24)
    t = args.index
    if t < LOOKBACK_INTERVALS or t + 1 > len(series):
        raise ValidationError("index leaves no room for the feature window")
    w, _ = load_checkpoint(args.weights)
    from .predictor import forward

    window = forward(
        np.concatenate([series.channel(c)[t - LOOKBACK_INTERVALS : t] for c in series.channels]),
        w,
    )[: min(horizon, len(series) - t)]
    if args.soc is not None:
        curve = anchored_bid_curve(window, args.soc, params)
    else:
        theta = compute_theta_segments(window, params, soc_grid(params))
        curve = form_bids(theta, params)
    text = curve.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _cmd_backtest(args) -> int:
    cfg = _load_config(args.config)
    params = _storage(cfg)
    sens = _sensitivity(cfg)
    series = read_price_csv(args.data)
    horizon = cfg.get("horizon", 24)
    if args.mode == "foresight":
        weights = None
    else:
        weights, _ = load_checkpoint(args.weights)
    report = backtest(
        series, weights, params, sens=sens, mode=args.mode, horizon=horizon,
        start=args.start, stop=args.stop,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(report.summary(), fh, indent=2)
    _write_manifest(out, "backtest", args.config,
                    [args.data] + ([args.weights] if weights is not None else []),
                    {"mode": args.mode, "final_profit": report.final_profit})
    print(f"backtest {args.mode}: profit {report.final_profit:.2f} over {report.t.size} intervals")
    return 0


def _read_report_csv(path):
    from .pipeline import BacktestReport

    with open(path) as fh:
        header = fh.readline().strip()
        if header != "t,p,b,soc,price,profit":
            raise ValidationError(f"unexpected report header in {path}")
        cols = [[], [], [], [], [], []]
        for line in fh:
            for c, cell in zip(cols, line.strip().split(",")):
                c.append(float(cell))
    return BacktestReport(
        mode=str(path), start_index=int(cols[0][0]) if cols[0] else 0, resolution="",
        t=np.array(cols[0]), p=np.array(cols[1]), b=np.array(cols[2]),
        soc=np.array(cols[3]), price=np.array(cols[4]), profit=np.array(cols[5]),
        final_profit=float(np.sum(cols[5])), curve_order_events=0,
    )


def _cmd_compare(args) -> int:
    rep_a = _read_report_csv(args.a)
    rep_b = _read_report_csv(args.b)
    summary = compare_reports(rep_a, rep_b, csv_path=args.out)
    print(
        f"a: {summary.final_a:.2f}  b: {summary.final_b:.2f}  "
        f"delta {summary.delta:+.2f} ({summary.pct_improvement:+.1f}%)"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config) if args.config else {"storage": {}}
    params = _storage(cfg) if args.config else validate_storage_params(StorageParams())
    quad = StorageParams(
        power_rating=params.power_rating, capacity=params.capacity,
        efficiency=params.efficiency, cost_linear=5.0, cost_quadratic=5.0,
        num_segments=params.num_segments, initial_soc=params.initial_soc,
    )
    jc = jacobian_check(quad, T=24, instances=args.instances, seed=args.seed)
    print(
        f"dual jacobian vs finite differences: max rel err {jc.max_rel_err:.2e} "
        f"({jc.rows_checked} rows, {jc.rows_flagged} flagged, "
        f"{jc.entries_straddled} straddled entries)"
    )
    lc = loss_gradient_check(params, samples=args.samples, draws=args.draws, seed=args.seed)
    print(
        f"loss gradient vs monte-carlo differences: max distance "
        f"{lc.max_sigma_distance:.2f} standard errors ({lc.coords_checked} coordinates)"
    )
    if args.dump:
        from .arbitrage import ArbProblem, solve_arbitrage
        from .gradcheck import random_window
        from .kktdiff import assemble_kkt_jacobian, dump_kkt_csv

        rng = np.random.default_rng(args.seed)
        prices = random_window(24, rng)
        sol = solve_arbitrage(ArbProblem(prices[1:], quad, quad.initial_soc))
        jac = assemble_kkt_jacobian(sol, quad, prices[1:])
        X = np.linalg.lstsq(jac.matrix, jac.rhs, rcond=None)[0]
        dump_kkt_csv(jac, X, args.dump)
        print(f"dumped linearized system to {args.dump}")
    ok = jc.max_rel_err <= 1e-3 and lc.max_sigma_distance <= 3.0
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storagebid",
        description="decision-focused bidding for energy storage arbitrage",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic price CSV")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="validate a price CSV (and optionally rewrite it)")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("pretrain", help="train the predictor on squared error")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", help="decision-focused fine-tuning from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("bid", help="emit the bid curve for one interval as JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--soc", type=float, help="anchor the curve at this SoC")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bid)

    p = sub.add_parser("backtest", help="run the sequential bidding simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights")
    p.add_argument("--mode", choices=["df", "three_stage", "foresight"], default="df")
    p.add_argument("--start", type=int)
    p.add_argument("--stop", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_backtest)

    p = sub.add_parser("compare", help="compare two backtest report CSVs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--draws", type=int, default=500)
    p.add_argument("--dump", help="write the linearized system as CSV to this directory")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
