"""Command-line interface: ``divtrack {cluster,track,backtest,grid,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or input.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import json
import logging
import os
import sys
import zlib

import numpy as np

from .backtest import (
    DEFAULT_LAMBDA1_GRID,
    DEFAULT_LAMBDA2_GRID,
    BacktestConfig,
    BacktestError,
    evaluate_grid,
    run_backtest,
)
from .ingest import DataError, ReturnsMatrix, load_price_panel, log_returns, write_price_panel
from .spectral import ClusteringError, cluster_assets
from .synthetic import PanelSpec, ToySpec, generate_panel, generate_toy
from .tracker import TrackerParams, TrackingError, sector_clusters, track

log = logging.getLogger("divtrack")

DEFAULTS = {
    "data": {
        "prices": None,
        "membership": None,
        "sectors": None,
        "index": None,
        "index_ticker": None,
        "x": None,
        "y": None,
        "strict": False,
    },
    "window": {"start": None, "end": None},
    "tracker": {"method": "cluster", "lambda1": 0.0, "lambda2": 0.0, "weight_threshold": 1e-6},
    "cluster": {"k": None, "sigma": None, "k_max": None, "restarts": 10},
    "backtest": {
        "start": None,
        "end": None,
        "lookback_days": 750,
        "initial_capital": 1_000_000.0,
        "fee_per_trade": 5.0,
        "fractional_shares": False,
        "validation_fraction": 0.2,
        "lambda1_grid": list(DEFAULT_LAMBDA1_GRID),
        "lambda2_grid": list(DEFAULT_LAMBDA2_GRID),
    },
    "toy": {"n_groups": 5, "dims": 750, "group_size_range": [50, 200], "noise_std": 0.05},
    "panel": {"n_assets": 200, "n_days": 1260, "n_industries": 10, "industries_per_sector": 2},
    "seed": 0,
    "threads": None,
    "out": "out",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed derived from the top-level seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _grid(spec, name):
    if isinstance(spec, dict):
        if set(spec) != {"start", "stop", "num"}:
            raise ConfigError(f"{name} object needs exactly start, stop, num")
        return tuple(np.linspace(spec["start"], spec["stop"], int(spec["num"])).tolist())
    if isinstance(spec, (int, float)):
        return (float(spec),)
    return tuple(float(v) for v in spec)


def _date(text, name):
    if text is None:
        return None
    try:
        return dt.date.fromisoformat(str(text))
    except ValueError:
        raise ConfigError(f"{name}: cannot parse date {text!r}") from None


def _flag_overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    for key in ("prices", "membership", "sectors", "index", "index_ticker", "x", "y"):
        put("data", key, getattr(args, key, None))
    put("window", "start", getattr(args, "start", None))
    put("window", "end", getattr(args, "end", None))
    put("tracker", "method", getattr(args, "method", None))
    put("tracker", "lambda1", getattr(args, "lambda1", None))
    put("tracker", "lambda2", getattr(args, "lambda2", None))
    put("cluster", "k", getattr(args, "k", None))
    put("cluster", "sigma", getattr(args, "sigma", None))
    if getattr(args, "fractional", False):
        put("backtest", "fractional_shares", True)
    put("backtest", "fee_per_trade", getattr(args, "fee", None))
    for key in ("seed", "threads", "out"):
        if getattr(args, key, None) is not None:
            o[key] = getattr(args, key)
    return o


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"no such file: {args.config}")
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        cfg = _merge(cfg, doc)
    return _merge(cfg, _flag_overrides(args))


def _echo_config(cfg: dict, out: str) -> str:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "config.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _check_paths(data: dict, keys):
    for key in keys:
        path = data.get(key)
        if path is not None and not os.path.exists(path):
            raise FileNotFoundError(f"no such file: {path}")


def _read_matrix(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if values.ndim != 2 or values.shape[1] != len(header):
        raise DataError(f"{path}: rows do not match header width {len(header)}")
    return header, values


def _write_matrix(path, header, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.atleast_2d(values):
            w.writerow([repr(float(v)) for v in row])


def _returns(cfg: dict, need_y: bool) -> tuple[ReturnsMatrix, object]:
    """Returns matrix from either matrix files or a price panel window."""
    data = cfg["data"]
    if data["x"] is not None:
        _check_paths(data, ["x", "y"])
        names, X = _read_matrix(data["x"])
        Y = np.zeros(X.shape[0])
        if data["y"] is not None:
            _, Ym = _read_matrix(data["y"])
            Y = Ym[:, 0]
        elif need_y:
            raise ConfigError("data.y is required with matrix input")
        if Y.shape[0] != X.shape[0]:
            raise DataError("X and Y have different row counts")
        return ReturnsMatrix(X, Y, tuple(names), (None, None)), None
    if data["prices"] is None or data["membership"] is None:
        raise ConfigError("give data.x or both data.prices and data.membership")
    _check_paths(data, ["prices", "membership", "sectors", "index"])
    panel = load_price_panel(data["prices"], data["membership"], data["sectors"], data["index"])
    start = _date(cfg["window"]["start"], "window.start") or panel.dates[0]
    end = _date(cfg["window"]["end"], "window.end") or panel.dates[-1]
    members = sorted(panel.members_at(end) - {data["index_ticker"]})
    rm = log_returns(panel, (start, end), members, data["index_ticker"], strict=data["strict"])
    return rm, panel


def _clusters(cfg, rm, panel, method, seed):
    if method == "cluster":
        c = cfg["cluster"]
        return cluster_assets(
            rm.X, sigma=c["sigma"], k=c["k"], seed=stage_seed(seed, "cluster"),
            k_max=c["k_max"], restarts=c["restarts"],
        )
    if method == "sector":
        if panel is None or panel.sector_of is None:
            raise ConfigError("sector method needs data.sectors")
        return sector_clusters(rm.tickers, panel.sector_of)
    return None


class _Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, out):
        self.out = out
        self.paths: list[str] = []

    def path(self, name):
        os.makedirs(self.out, exist_ok=True)
        p = os.path.join(self.out, name)
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            if os.path.exists(p):
                os.remove(p)


def cmd_cluster(cfg, outputs: _Outputs):
    rm, panel = _returns(cfg, need_y=False)
    model = _clusters(cfg, rm, panel, "cluster", cfg["seed"])
    with open(outputs.path("labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "label"])
        for t, lab in zip(rm.tickers, model.labels):
            w.writerow([t, int(lab)])
    _write_matrix(outputs.path("A.csv"), list(rm.tickers), model.similarity.astype(int))
    with open(outputs.path("eigenvalues.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "eigenvalue"])
        for i, v in enumerate(model.eigenvalues, start=1):
            w.writerow([i, repr(float(v))])
    print(f"K={model.K} sigma={model.sigma:.6g} assets={model.N}")


def _params(cfg) -> TrackerParams:
    t = cfg["tracker"]
    return TrackerParams(t["method"], float(t["lambda1"]), float(t["lambda2"]), float(t["weight_threshold"]))


def cmd_track(cfg, outputs: _Outputs):
    params = _params(cfg)
    rm, panel = _returns(cfg, need_y=True)
    model = _clusters(cfg, rm, panel, params.method, cfg["seed"])
    pf = track(rm, clusters=model, params=params)
    pf.to_csv(outputs.path("portfolio.csv"))
    pf.to_json(outputs.path("portfolio.json"))
    print(f"{params.method}: {pf.n_holdings} holdings")


def _backtest_config(cfg, method) -> BacktestConfig:
    b = cfg["backtest"]
    start = _date(b["start"] or cfg["window"]["start"], "backtest.start")
    end = _date(b["end"] or cfg["window"]["end"], "backtest.end")
    if start is None or end is None:
        raise ConfigError("backtest.start and backtest.end are required")
    return BacktestConfig(
        start=start,
        end=end,
        method=method,
        lookback_days=int(b["lookback_days"]),
        initial_capital=float(b["initial_capital"]),
        fee_per_trade=float(b["fee_per_trade"]),
        weight_threshold=float(cfg["tracker"]["weight_threshold"]),
        lambda1_grid=_grid(b["lambda1_grid"], "backtest.lambda1_grid"),
        lambda2_grid=_grid(b["lambda2_grid"], "backtest.lambda2_grid"),
        validation_fraction=float(b["validation_fraction"]),
        fractional_shares=bool(b["fractional_shares"]),
        strict=bool(cfg["data"]["strict"]),
        index_ticker=cfg["data"]["index_ticker"],
        seed=stage_seed(cfg["seed"], "cluster"),
        threads=cfg["threads"],
        cluster_k=cfg["cluster"]["k"],
        cluster_sigma=cfg["cluster"]["sigma"],
    )


def cmd_backtest(cfg, outputs: _Outputs):
    params = _params(cfg)
    data = cfg["data"]
    if data["prices"] is None or data["membership"] is None:
        raise ConfigError("backtest needs data.prices and data.membership")
    _check_paths(data, ["prices", "membership", "sectors", "index"])
    panel = load_price_panel(data["prices"], data["membership"], data["sectors"], data["index"])
    config = _backtest_config(cfg, params.method)
    report = run_backtest(panel, config)
    for name in ("report.json", "daily.csv", "rebalances.csv"):
        outputs.path(name)
    report.write(outputs.out)
    print("Method   Negative  Positive  Sum  Mean")
    m = report.metrics
    print(f"{params.method}  {m.negative_sum:.2f}  {m.positive_sum:.2f}  {m.total_sum:.2f}  {m.mean_pct:.2f}%")


def cmd_grid(cfg, outputs: _Outputs):
    params = _params(cfg)
    rm, panel = _returns(cfg, need_y=True)
    model = _clusters(cfg, rm, panel, params.method, cfg["seed"])
    b = cfg["backtest"]
    grids = (_grid(b["lambda1_grid"], "backtest.lambda1_grid"), _grid(b["lambda2_grid"], "backtest.lambda2_grid"))
    points = evaluate_grid(
        rm.X, rm.Y, model, grids, float(b["validation_fraction"]),
        params.weight_threshold, cfg["threads"],
    )
    with open(outputs.path("grid.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda1", "lambda2", "mse", "diversity_loss", "n_holdings"])
        for p in points:
            w.writerow([repr(p.lambda1), repr(p.lambda2), repr(p.mse), repr(p.diversity_loss), p.n_holdings])
    print(f"{len(points)} grid points")


def cmd_synth(cfg, outputs: _Outputs, kind: str):
    if kind == "panel":
        p = cfg["panel"]
        panel = generate_panel(PanelSpec(seed=stage_seed(cfg["seed"], "panel"), **p))
        for name in ("prices.csv", "membership.csv", "sectors.csv", "index.csv"):
            outputs.path(name)
        write_price_panel(panel, outputs.out)
        print(f"panel: {len(panel.tickers)} assets x {len(panel.dates)} dates")
        return
    t = cfg["toy"]
    spec = ToySpec(
        n_groups=int(t["n_groups"]),
        dims=int(t["dims"]),
        group_size_range=tuple(t["group_size_range"]),
        noise_std=float(t["noise_std"]),
        seed=stage_seed(cfg["seed"], "toy"),
    )
    inst = generate_toy(spec)
    names = [f"a{j:04d}" for j in range(inst.X.shape[1])]
    _write_matrix(outputs.path("X.csv"), names, inst.X)
    _write_matrix(outputs.path("Y.csv"), ["y"], inst.Y[:, None])
    with open(outputs.path("groups.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "group"])
        for n, g in zip(names, inst.group_of):
            w.writerow([n, int(g)])
    print(f"toy: {inst.X.shape[0]} x {inst.X.shape[1]}, group sizes {inst.sizes.tolist()}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true")

    def data(p):
        p.add_argument("--prices")
        p.add_argument("--membership")
        p.add_argument("--sectors")
        p.add_argument("--index", help="index CSV (date,index_value)")
        p.add_argument("--index-ticker", dest="index_ticker")
        p.add_argument("--x", help="returns matrix CSV (rows = dates, header = assets)")
        p.add_argument("--y", help="index returns CSV (header y)")
        p.add_argument("--start")
        p.add_argument("--end")

    def tracker(p):
        p.add_argument("--method", choices=["baseline", "ridge", "sector", "cluster"])
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)

    def clustering(p):
        p.add_argument("--k", type=int, help="fix the cluster count")
        p.add_argument("--sigma", type=float, help="fix the affinity bandwidth")

    p = sub.add_parser("cluster", help="spectral clustering; writes labels.csv, A.csv, eigenvalues.csv")
    common(p), data(p), clustering(p)
    p = sub.add_parser("track", help="solve one tracking problem; writes portfolio.csv/json")
    common(p), data(p), tracker(p), clustering(p)
    p = sub.add_parser("backtest", help="rolling backtest; writes report.json, daily.csv, rebalances.csv")
    common(p), data(p), tracker(p), clustering(p)
    p.add_argument("--fee", type=float, help="flat fee per trade")
    p.add_argument("--fractional", action="store_true", help="allow fractional shares")
    p = sub.add_parser("grid", help="evaluate the lambda grid on one window; writes grid.csv")
    common(p), data(p), tracker(p), clustering(p)
    p = sub.add_parser("synth", help="write a synthetic toy problem or price panel")
    common(p)
    p.add_argument("--kind", choices=["toy", "panel"], default="toy")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
        if args.command in ("track", "backtest", "grid"):
            _params(cfg)  # reject invalid method/lambda combinations up front
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2

    outputs = _Outputs(cfg["out"])
    try:
        if args.command == "cluster":
            cmd_cluster(cfg, outputs)
        elif args.command == "track":
            cmd_track(cfg, outputs)
        elif args.command == "backtest":
            cmd_backtest(cfg, outputs)
        elif args.command == "grid":
            cmd_grid(cfg, outputs)
        else:
            cmd_synth(cfg, outputs, args.kind)
    except FileNotFoundError as exc:
        outputs.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrackingError, BacktestError, ClusteringError) as exc:
        outputs.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, ValueError, TypeError) as exc:
        outputs.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        outputs.cleanup()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    _echo_config(cfg, cfg["out"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
