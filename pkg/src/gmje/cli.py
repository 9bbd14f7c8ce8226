"""Command-line experiment harness.

Every subcommand reads defaults, then an optional ``key = value`` config file
(``--config``), then ``--key value`` flags, and writes the resolved settings to
``<out>/config.txt`` next to its outputs.

Exit codes: 0 success, 1 usage or config error, 2 numerical contract failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import diagnostics, synthdata
from .errors import ConfigError, GmjeError
from .gaussian import symmetrize
from .gje import BatchEmbeddings, KernelSpec, dual_nll, dual_predict
from .gng import GngConfig, GngGraph, gng_components, gng_extract_prototypes, gng_fit_stream
from .mixture import (
    JointMixture,
    conditional_mixture,
    em_fit_trace,
    responsibilities,
    sample_mixture,
)
from .neural import Mlp, MdnModel, TrainConfig, jepa_mse_train, mdn_forward, mlp_forward, train_gmje_mdn
from .rng import make_rng
from .smc import BankConfig, StreamConfig, smc_simulation, write_metrics_csv

MODELS = ("jepa-mse", "gje-dual-rbf", "gmje-em-1", "gmje-em-3", "gmje-gng", "gmje-mdn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# key -> (default, parser, help)
SCHEMAS: dict[str, dict[str, tuple[Any, Callable[[str], Any], str]]] = {
    "gen-data": {
        "dataset": ("A", str, "A (separated branches) or B (intersecting branches)"),
        "n": (synthdata.DEFAULT_N, int, "number of pairs"),
        "noise": (synthdata.DEFAULT_NOISE, float, "Gaussian observation noise std"),
        "seed": (111, int, "generator seed"),
        "out": ("out/data", str, "output directory"),
    },
    "fit": {
        "data": ("out/data/data.csv", str, "dataset CSV from gen-data"),
        "dataset": ("A", str, "dataset kind used for branch metrics"),
        "model": ("gmje-mdn", str, "one of " + ", ".join(MODELS)),
        "seed": (111, int, "initialization seed"),
        "epochs": (1200, int, "full-batch epochs (neural models)"),
        "lr": (1e-2, float, "Adam learning rate"),
        "hidden": ("64,64", str, "hidden widths, comma separated"),
        "k": (3, int, "MDN components"),
        "sigma_floor": (1e-5, float, "MDN sigma floor"),
        "entropy_max": (False, _bool, "flip the sign of the MDN marginal log-det term"),
        "length_scale": (0.5, float, "RBF length scale (gje-dual-rbf)"),
        "kernel_noise": (0.1, float, "Gram diagonal noise (gje-dual-rbf)"),
        "em_max_iters": (200, int, "EM iteration cap"),
        "em_tol": (1e-7, float, "EM relative log-likelihood tolerance"),
        "gng_steps": (30000, int, "GNG stream length"),
        "out": ("out/fit", str, "output directory"),
    },
    "predict": {
        "model": ("out/fit/model.json", str, "model JSON from fit"),
        "grid": (synthdata.GRID_SIZE, int, "context grid size on [-1, 1]"),
        "heatmap_bins": (200, int, "target bins on [-2, 2] for density heatmaps (0 disables)"),
        "out": ("out/predict", str, "output directory"),
    },
    "sample": {
        "model": ("out/fit/model.json", str, "model JSON from fit"),
        "n": (5000, int, "number of draws"),
        "seed": (111, int, "sampling seed"),
        "uniform_weights": (False, _bool, "replace learned mixture weights by 1/K"),
        "out": ("out/sample", str, "output directory"),
    },
    "smc-sim": {
        "steps": (50000, int, "stream steps"),
        "bank_size": (256, int, "bank capacity M"),
        "batch_size": (32, int, "incoming batch size B"),
        "tau": (0.1, float, "temperature"),
        "n_classes": (10, int, "class count"),
        "dim": (16, int, "embedding dimension"),
        "rare_frequency": (0.01, float, "frequency of class 0"),
        "spread": (0.3, float, "within-class spread"),
        "scheme": ("systematic", str, "systematic or multinomial"),
        "ess_threshold": (0.0, float, "resample only when ESS/pool falls below this (0 = every step)"),
        "seed": (111, int, "shared stream seed"),
        "out": ("out/smc", str, "output directory"),
    },
    "diagnostics": {
        "seed": (111, int, "seed for random test instances"),
        "inject_asymmetric": (False, _bool, "factor a deliberately asymmetric covariance"),
        "out": ("out/diagnostics", str, "output directory"),
    },
}


def read_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(command: str, file_values: dict[str, str], flag_values: dict[str, str]) -> dict[str, Any]:
    schema = SCHEMAS[command]
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {k: v[0] for k, v in schema.items()}
    for source in (file_values, flag_values):
        for k, v in source.items():
            try:
                cfg[k] = schema[k][1](v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from exc
    return cfg


def write_config(cfg: dict[str, Any], out: Path) -> None:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in sorted(cfg.items())]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict[str, Any], out: Path) -> None:
    kind = cfg["dataset"].upper()
    if kind not in ("A", "B"):
        raise ConfigError("dataset must be A or B")
    ds = synthdata.gen_dataset(kind, cfg["n"], cfg["noise"], cfg["seed"])
    synthdata.write_csv(ds, out / "data.csv")
    _dump_json({"dataset": kind, "n": len(ds), "noise": cfg["noise"], "seed": cfg["seed"],
                "columns": ["x_c", "x_t", "branch_id"]}, out / "meta.json")


def _gng_mixture(graph: GngGraph, data: np.ndarray) -> JointMixture:
    # GNG yields means only: weights and one shared covariance come from nearest-prototype assignment
    protos = gng_extract_prototypes(graph)
    d2 = np.sum((data[:, None, :] - protos[None]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    counts = np.bincount(assign, minlength=protos.shape[0]).astype(float)
    weights = np.maximum(counts, 1.0)
    weights /= weights.sum()
    resid = data - protos[assign]
    cov = symmetrize(resid.T @ resid / data.shape[0]) + 1e-6 * np.eye(data.shape[1])
    return JointMixture.from_arrays(weights, protos, np.repeat(cov[None], protos.shape[0], 0), 1)


def cmd_fit(cfg: dict[str, Any], out: Path) -> None:
    model = cfg["model"]
    if model not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(MODELS)}")
    ds = synthdata.read_csv(cfg["data"], cfg["dataset"].upper())
    rng = make_rng(cfg["seed"])
    hidden = tuple(int(h) for h in str(cfg["hidden"]).split(",") if h.strip())
    tcfg = TrainConfig(hidden, cfg["lr"], cfg["epochs"], cfg["k"], cfg["sigma_floor"], 0.99, cfg["entropy_max"])
    metrics: dict[str, Any] = {"model": model, "n": len(ds)}
    payload: dict[str, Any] = {"model": model}
    curve_header = ["epoch", "loss"]
    curve: list[list] = []

    if model == "jepa-mse":
        net, losses = jepa_mse_train(ds.x_c, ds.x_t, tcfg, rng)
        payload["net"] = net.to_json()
        curve = [[i, loss] for i, loss in enumerate(losses)]
        metrics["final_loss"] = losses[-1]
    elif model == "gmje-mdn":
        mdn, losses = train_gmje_mdn(ds.x_c, ds.x_t, tcfg, rng)
        payload["mdn"] = mdn.to_json()
        curve = [[i, loss] for i, loss in enumerate(losses)]
        metrics["final_loss"] = losses[-1]
    elif model == "gje-dual-rbf":
        kernel = KernelSpec("rbf", cfg["length_scale"], cfg["kernel_noise"])
        batch = BatchEmbeddings(ds.x_c, ds.x_t)
        value = dual_nll(batch, kernel)
        payload.update(kernel={"kind": "rbf", "length_scale": kernel.length_scale, "noise": kernel.noise},
                       train={"z_c": ds.x_c.tolist(), "z_t": ds.x_t.tolist()})
        curve = [[0, value]]
        metrics["dual_nll"] = value
    elif model in ("gmje-em-1", "gmje-em-3"):
        k = 1 if model.endswith("-1") else 3
        trace = em_fit_trace(ds.joint, k, cfg["em_max_iters"], cfg["em_tol"], rng, d_c=1)
        payload["mixture"] = trace.mixture.to_json()
        curve_header = ["iteration", "log_likelihood"]
        curve = [[i, ll] for i, ll in enumerate(trace.log_likelihoods)]
        metrics.update(iterations=trace.iterations, converged=trace.converged,
                       log_likelihood=trace.log_likelihoods[-1],
                       cov_traces=[float(np.trace(c)) for c in trace.mixture.covs],
                       weights=trace.mixture.weights.tolist())
        resp = responsibilities(trace.mixture, ds.joint)
        purity = [float(np.max(np.bincount(ds.branch_id[resp.argmax(1) == j], minlength=3)) /
                        max(1, int(np.sum(resp.argmax(1) == j)))) for j in range(k)]
        metrics["branch_purity"] = purity
    else:  # gmje-gng
        run = gng_fit_stream(ds.joint, cfg["gng_steps"], GngConfig(), rng)
        mix = _gng_mixture(run.graph, ds.joint)
        payload.update(mixture=mix.to_json(), graph=run.graph.to_json())
        curve_header = ["step", "quantization_ema", "nodes"]
        curve = [[t + 1, run.quantization_ema[t], int(run.node_counts[t])]
                 for t in range(0, cfg["gng_steps"], 100)]
        metrics.update(nodes=run.graph.n_nodes, components=gng_components(run.graph),
                       final_quantization_ema=float(run.quantization_ema[-1]))

    _dump_json(payload, out / "model.json")
    _write_rows(out / "curve.csv", curve_header, curve)
    _dump_json(metrics, out / "metrics.json")


def _load_model(path: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"model file not found: {path}") from exc
    if obj.get("model") not in MODELS:
        raise ConfigError(f"unrecognized model file {path}")
    return obj


def _mixture_rows(grid: np.ndarray, per_point) -> tuple[list[str], list[list]]:
    # per_point(x) -> (gammas, means, sigmas)
    rows = []
    k = None
    for x in grid:
        g, mu, sd = per_point(x)
        k = len(g)
        var_within = float(np.sum(g * sd**2))
        tot_mean = float(np.sum(g * mu))
        var_between = float(np.sum(g * (mu - tot_mean) ** 2))
        rows.append([float(x), *g.tolist(), *mu.tolist(), *sd.tolist(), tot_mean,
                     var_within + var_between, var_within, var_between])
    header = (["x_c"] + [f"gamma_{i}" for i in range(k)] + [f"mu_{i}" for i in range(k)]
              + [f"sigma_{i}" for i in range(k)] + ["total_mean", "total_var", "within_var", "between_var"])
    return header, rows


def _heatmap(grid: np.ndarray, bins: int, per_point, path: Path) -> None:
    ys = np.linspace(-2.0, 2.0, bins)
    rows = []
    for x in grid:
        g, mu, sd = per_point(x)
        dens = np.sum(g[:, None] * np.exp(-0.5 * ((ys[None] - mu[:, None]) / sd[:, None]) ** 2)
                      / (np.sqrt(2 * np.pi) * sd[:, None]), axis=0)
        rows += [[float(x), float(y), float(p)] for y, p in zip(ys, dens)]
    _write_rows(path, ["x_c", "x_t", "density"], rows)


def cmd_predict(cfg: dict[str, Any], out: Path) -> None:
    obj = _load_model(cfg["model"])
    grid = synthdata.eval_grid(cfg["grid"])
    kind = obj["model"]
    per_point = None
    if kind == "jepa-mse":
        pred = mlp_forward(Mlp.from_json(obj["net"]), grid[:, None])[0][:, 0]
        _write_rows(out / "predictions.csv", ["x_c", "mean"], [[float(x), float(p)] for x, p in zip(grid, pred)])
    elif kind == "gje-dual-rbf":
        kern = KernelSpec("rbf", obj["kernel"]["length_scale"], obj["kernel"]["noise"])
        train = BatchEmbeddings(np.asarray(obj["train"]["z_c"]), np.asarray(obj["train"]["z_t"]))
        rows = []
        for x in grid:
            g = dual_predict(train, kern, np.array([x]))
            rows.append([float(x), float(g.mean[0]), float(np.sqrt(g.cov[0, 0]))])
        _write_rows(out / "predictions.csv", ["x_c", "mean", "std"], rows)
    elif kind == "gmje-mdn":
        mdn = MdnModel.from_json(obj["mdn"])
        p = mdn_forward(mdn.trunk, mdn.head, grid[:, None])
        lookup = {float(x): i for i, x in enumerate(grid)}

        def per_point(x):
            i = lookup[float(x)]
            return p.alpha[i], p.mu[i, :, 0], p.sigma[i]
    else:
        mix = JointMixture.from_json(obj["mixture"])

        def per_point(x):
            cm = conditional_mixture(mix, np.array([x]))
            return (cm.responsibilities, np.array([m[0] for m in cm.cond_means]),
                    np.sqrt(np.array([c[0, 0] for c in cm.cond_covs])))

    if per_point is not None:
        header, rows = _mixture_rows(grid, per_point)
        _write_rows(out / "predictions.csv", header, rows)
        if cfg["heatmap_bins"] > 0:
            _heatmap(grid, cfg["heatmap_bins"], per_point, out / "heatmap.csv")


def cmd_sample(cfg: dict[str, Any], out: Path) -> None:
    obj = _load_model(cfg["model"])
    rng = make_rng(cfg["seed"])
    n = cfg["n"]
    kind = obj["model"]
    if kind in ("jepa-mse", "gje-dual-rbf"):
        raise ConfigError(f"{kind} defines no density over the joint space; nothing to sample")
    if kind == "gmje-mdn":
        mdn = MdnModel.from_json(obj["mdn"])
        d_c = mdn.head.context_dim
        xc = rng.standard_normal((n, d_c)) @ np.linalg.cholesky(mdn.ema.cov).T
        p = mdn_forward(mdn.trunk, mdn.head, xc)
        alpha = np.full_like(p.alpha, 1.0 / mdn.head.k) if cfg["uniform_weights"] else p.alpha
        u = rng.random(n)
        comp = np.minimum((np.cumsum(alpha, axis=1) <= u[:, None]).sum(1), mdn.head.k - 1)
        eps = rng.standard_normal((n, mdn.head.target_dim))
        xt = p.mu[np.arange(n), comp] + p.sigma[np.arange(n), comp][:, None] * eps
        rows = [[float(a), float(b), int(c)] for a, b, c in zip(xc[:, 0], xt[:, 0], comp)]
    else:
        mix = JointMixture.from_json(obj["mixture"])
        w = np.full(mix.k, 1.0 / mix.k) if cfg["uniform_weights"] else mix.weights
        draws, labels = sample_mixture(w, mix.joint_gaussians(), n, rng, return_labels=True)
        rows = [[float(a), float(b), int(c)] for (a, b), c in zip(draws, labels)]
    _write_rows(out / "samples.csv", ["x_c", "x_t", "component"], rows)


def cmd_smc_sim(cfg: dict[str, Any], out: Path) -> None:
    if cfg["scheme"] not in ("systematic", "multinomial"):
        raise ConfigError("scheme must be systematic or multinomial")
    stream = StreamConfig(cfg["n_classes"], cfg["dim"], 0, cfg["rare_frequency"], cfg["batch_size"], cfg["spread"])
    bank = BankConfig(cfg["bank_size"], cfg["tau"], cfg["scheme"], cfg["ess_threshold"] or None)
    res = smc_simulation(stream, bank, cfg["steps"], make_rng(cfg["seed"]))
    write_metrics_csv(res, out / "smc.csv", "smc")
    write_metrics_csv(res, out / "fifo.csv", "fifo")
    _dump_json({"smc_rare_occupancy": res.smc_rare_occupancy, "fifo_rare_occupancy": res.fifo_rare_occupancy,
                "ess_min": float(res.ess.min()), "ess_max": float(res.ess.max()),
                "pool_size": res.pool_size}, out / "summary.json")


def cmd_diagnostics(cfg: dict[str, Any], out: Path) -> int:
    if cfg["inject_asymmetric"]:
        from .gaussian import chol_logdet

        chol_logdet(np.array([[1.0, 0.5], [0.1, 1.0]]))
    report = diagnostics.run_all(make_rng(cfg["seed"]))
    _dump_json(report, out / "report.json")
    for c in report["checks"]:
        status = "ok  " if c["passed"] else "FAIL"
        print(f"{status} {c['name']}: {c['value']:.3e} (threshold {c['threshold']:.0e})")
    return 0 if report["all_passed"] else 2


COMMANDS: dict[str, Callable[[dict[str, Any], Path], int | None]] = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "sample": cmd_sample,
    "smc-sim": cmd_smc_sim,
    "diagnostics": cmd_diagnostics,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gmje", description="Gaussian mixture joint-embedding experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", help="key = value config file")
        for key, (default, _, text) in schema.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"{text} (default: {default})")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command = args.command
        flags = {k: v for k, v in vars(args).items() if k in SCHEMAS[command] and v is not None}
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, file_values, flags)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out)
        code = COMMANDS[command](cfg, out)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GmjeError as exc:
        print(f"contract failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
