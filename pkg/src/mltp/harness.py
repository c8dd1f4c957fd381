"""Training/evaluation loop, gradient verification, Taylor scans and reports."""

from __future__ import annotations

import csv
import glob
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as D
from .errors import ConfigError, NumericError
from .gradcheck import finite_diff_grad, max_relative_error
from .meta import (AlphaSet, ObjectiveConfig, TrainState, _differentiable, _groups, _inner_grads,
                   inner_step, mltp_grads, mltp_objective, regularized_objective, taylor_objective,
                   task_loss, train_step)
from .nn import forward, init_params
from .optim import OptimizerState, lr_at

log = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
PROCEDURES = ("standard", "mltp_full", "mltp_conv", "mltp_fc", "mltp_fo")
PROCEDURE_TITLES = {"standard": "Standard", "mltp_full": "MLTP", "mltp_conv": "MLTP_conv",
                    "mltp_fc": "MLTP_fc", "mltp_fo": "MLTP_FO"}


# ---------------------------------------------------------------- data

def load_datasets(cfg):
    """Train/test datasets for a config, preprocessed and cast to its precision."""
    d = cfg.data
    try:
        if d.source == "synth":
            train = D.make_synth(d.kind, d.n_train_per_class, d.classes, d.noise, d.seed, "train")
            test = D.make_synth(d.kind, d.n_test_per_class, d.classes, d.noise,
                                d.seed + 7919, "test")
        elif d.source == "csv":
            k = cfg.network.num_classes
            train = D.load_csv(d.train_path, d.num_features, k, "train")
            test = D.load_csv(d.test_path, d.num_features, k, "test")
        else:
            k = cfg.network.num_classes
            train = D.load_idx(d.train_images, d.train_labels, k, "train")
            test = D.load_idx(d.test_images, d.test_labels, k, "test")
    except (OSError, TypeError) as exc:
        raise ConfigError(f"cannot load data: {exc}") from None
    if d.standardize == "per-image":
        train, test = D.standardize(train, "per-image"), D.standardize(test, "per-image")
    elif d.standardize == "global":
        stats = D.global_stats(train)
        train, test = D.standardize(train, "global", stats), D.standardize(test, "global", stats)
    dtype = np.float32 if cfg.precision == 32 else np.float64
    return train.astype(dtype), test.astype(dtype)


def evaluate(spec, params, dataset, batch_size=1000):
    """``(mean loss, accuracy %)`` in eval mode."""
    total_loss = 0.0
    correct = 0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            b = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
            logits = forward(spec, params, b.x, mode="eval")
            if spec.loss == "squared":
                loss = ad.squared_error(logits, b.y)
            else:
                loss = ad.softmax_cross_entropy(logits, b.y)
                correct += int(np.sum(np.argmax(logits.value, axis=1) == b.y))
            total_loss += float(loss.value) * len(b)
    return total_loss / len(dataset), 100.0 * correct / len(dataset)


# ---------------------------------------------------------------- training

@dataclass
class RunResult:
    seed: int
    status: str
    final_test_acc: float
    metrics_path: str
    params_path: str | None = None
    rows: list = field(default_factory=list)


def metrics_header(n_alpha):
    return ["seed", "epoch", "wall_time_s", "train_loss", "test_acc", "lr"] + \
        [f"alpha_{i}" for i in range(n_alpha)]


def _fmt(v):
    return repr(float(v))


def _seed_int(seed, name, *extra):
    return int(D.stream(seed, name, *extra).integers(0, 2**31 - 1))


def save_params(path, params, alpha):
    arrays = {}
    for gi, g in enumerate(params.groups):
        for name, t in zip(g.names, g.tensors):
            arrays[f"g{gi}_{name}"] = t
    for layer, buf in params.buffers.items():
        for name, v in buf.items():
            arrays[f"bn{layer}_{name}"] = v
    arrays["alpha"] = alpha.values
    np.savez(path, **arrays)


def train_seed(cfg, seed, spec=None, datasets=None, out_dir=None):
    """Train one seed, writing the metrics CSV and final parameter snapshot."""
    spec = spec or cfg.network_spec()
    train, test = datasets or load_datasets(cfg)
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    dtype = np.float32 if cfg.precision == 32 else np.float64
    objective = cfg.objective_config()
    opt_spec = cfg.optimizer_spec()
    init = tuple(cfg.init) if isinstance(cfg.init, list) else cfg.init
    params = init_params(spec, init, seed=_seed_int(seed, "init"), dtype=dtype)
    alpha = AlphaSet.init(len(params), cfg.alpha.mean, cfg.alpha.std,
                          seed=_seed_int(seed, "alpha"), learnable=cfg.alpha.mode == "learnable",
                          dtype=dtype)
    state = TrainState(spec, params, alpha, OptimizerState(opt_spec), OptimizerState(opt_spec),
                       dropout_seed=_seed_int(seed, "dropout"))
    mltp = objective.variant != "standard"
    two_batches = mltp and cfg.data.sampler == "two-batches"
    augment_spec = D.AugmentSpec(cfg.data.augment.pad, cfg.data.augment.flip,
                                 tuple(cfg.data.augment.crop) if cfg.data.augment.crop else None)
    use_augment = augment_spec != D.AugmentSpec() and train.x.ndim == 4

    metrics_path = os.path.join(out_dir, f"metrics_seed{seed}.csv")
    timing_path = os.path.join(out_dir, f"timing_seed{seed}.csv")
    params_path = os.path.join(out_dir, f"params_seed{seed}.npz")
    result = RunResult(seed, "ok", math.nan, metrics_path)
    start = time.perf_counter()

    with ad.deterministic(cfg.deterministic), open(metrics_path, "w", newline="") as fh, \
            open(timing_path, "w", newline="") as tfh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(len(alpha)))
        twriter = csv.writer(tfh, lineterminator="\n")
        twriter.writerow(["seed", "epoch", "wall_time_s"])

        def emit(epoch, train_loss, test_acc, lr):
            wall = time.perf_counter() - start
            # wall time breaks byte-reproducibility, so it goes to the sidecar only
            shown = 0.0 if cfg.deterministic else wall
            row = [seed, epoch, _fmt(shown), _fmt(train_loss), _fmt(test_acc), _fmt(lr)] + \
                [_fmt(a) for a in state.alpha.values]
            writer.writerow(row)
            fh.flush()
            twriter.writerow([seed, epoch, _fmt(wall)])
            tfh.flush()
            result.rows.append(row)

        loss0, _ = evaluate(spec, state.params, train, cfg.eval_batch_size)
        _, acc0 = evaluate(spec, state.params, test, cfg.eval_batch_size)
        emit(0, loss0, acc0, lr_at(opt_spec, 0))
        result.final_test_acc = acc0
        for epoch in range(1, cfg.epochs + 1):
            state.epoch = epoch - 1
            lr = lr_at(opt_spec, state.epoch)
            batches = D.epoch_batches(len(train), cfg.batch_size, D.stream(seed, "shuffle", epoch),
                                      drop_last=mltp)
            step_batches = [train.batch(idx) for idx in batches]
            if use_augment:
                step_batches = [
                    D.Batch(D.augment(b.x, augment_spec, _seed_int(seed, "augment", epoch, k)),
                            b.y, b.index)
                    for k, b in enumerate(step_batches)]
            if two_batches:
                step_batches = [D.TaskPair(a, b)
                                for a, b in zip(step_batches[0::2], step_batches[1::2])]
            try:
                # divergence is detected and reported explicitly, so numpy's warnings are noise
                with np.errstate(over="ignore", invalid="ignore"):
                    for b in step_batches:
                        state = train_step(state, b, objective)
            except NumericError as exc:
                log.error("seed %s aborted at epoch %d: %s %s", seed, epoch, exc, exc.diagnostics)
                emit(epoch, math.nan, math.nan, lr)
                result.status = "numeric-failure"
                result.final_test_acc = math.nan
                return result
            with np.errstate(over="ignore", invalid="ignore"):
                train_loss, _ = evaluate(spec, state.params, train, cfg.eval_batch_size)
                _, test_acc = evaluate(spec, state.params, test, cfg.eval_batch_size)
            if not math.isfinite(train_loss):
                emit(epoch, math.nan, math.nan, lr)
                result.status = "numeric-failure"
                result.final_test_acc = math.nan
                return result
            emit(epoch, train_loss, test_acc, lr)
            result.final_test_acc = test_acc
    save_params(params_path, state.params, state.alpha)
    result.params_path = params_path
    return result


def run_train(cfg):
    """Train every configured seed; echoes the resolved config to ``out_dir``."""
    spec = cfg.network_spec()
    datasets = load_datasets(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, CONFIG_NAME), "w") as fh:
        fh.write(cfg.dumps())
    return [train_seed(cfg, seed, spec, datasets) for seed in cfg.seeds]


# ---------------------------------------------------------------- gradcheck

def frozen_inner_objective(spec, params, alpha, task_i, task_j, config, inner_grads,
                           seeds=(None, None)):
    """Objective with the inner gradient replaced by fixed arrays.

    Its exact gradient is what the first-order variant reports, so it is the
    finite-difference target for that variant.
    """
    groups = _groups(params)
    mask = config.resolve_mask(spec)
    c_i = task_loss(spec, groups, task_i, seed=seeds[0], buffers=getattr(params, "buffers", None))
    grads = [None if g is None else [ad.Node(a) for a in g] for g in inner_grads]
    adapted = inner_step(groups, grads, alpha, mask)
    c_j = task_loss(spec, adapted, task_j, seed=seeds[1], buffers=getattr(params, "buffers", None))
    return regularized_objective(c_i + config.eta * c_j, groups, config.beta, spec)


def inner_gradients(spec, params, task, config, seed=None):
    groups = _differentiable(_groups(params))
    c_i = task_loss(spec, groups, task, seed=seed, buffers=params.buffers)
    grads = _inner_grads(c_i, groups, config.resolve_mask(spec), create_graph=False)
    return [None if g is None else [n.value for n in g] for g in grads]


def gradcheck_variants(spec, params, alpha, pair, eta=1.0, beta=0.0,
                       variants=("mltp_full", "mltp_conv", "mltp_fc", "mltp_fo"),
                       step=1e-5, tol=1e-4, seeds=(11, 12)):
    """Compare analytic gradients of each variant with central differences.

    Returns a dict keyed by variant with the analytic gradients, per-group
    and alpha errors and a pass flag, plus ``fo_gap`` (largest absolute
    difference between full and first-order ``w`` gradients) when both ran.
    """
    params = params.astype(np.float64)
    alpha = AlphaSet(np.asarray(alpha.values, dtype=np.float64), learnable=True)
    report = {}
    for variant in variants:
        config = ObjectiveConfig(variant, eta, beta)
        analytic = mltp_grads(spec, params, alpha, pair.task_i, pair.task_j, config, seeds=seeds)
        if variant == "mltp_fo":
            frozen = inner_gradients(spec, params, pair.task_i, config, seed=seeds[0])

            def f_w(p, a=alpha):
                return frozen_inner_objective(spec, p, a, pair.task_i, pair.task_j, config,
                                              frozen, seeds).item()

            def f_a(values):
                return frozen_inner_objective(spec, params, AlphaSet(values), pair.task_i,
                                              pair.task_j, config, frozen, seeds).item()
        else:
            def f_w(p, a=alpha):
                return mltp_objective(spec, p, a, pair.task_i, pair.task_j, config, seeds).item()

            def f_a(values):
                return mltp_objective(spec, params, AlphaSet(values), pair.task_i, pair.task_j,
                                      config, seeds).item()

        numeric_w = finite_diff_grad(f_w, params, step=step, scaled=True)
        numeric_a = finite_diff_grad(f_a, alpha.values.copy(), step=step, scaled=True)[0]
        errors = {}
        pos = 0
        for gi, g in enumerate(analytic.w):
            errors[f"group{gi}"] = max_relative_error(g, numeric_w[pos:pos + len(g)])
            pos += len(g)
        errors["alpha"] = max_relative_error([analytic.alpha], [numeric_a])
        report[variant] = {
            "objective": analytic.value,
            "w": analytic.w,
            "alpha": analytic.alpha,
            "errors": errors,
            "max_error": max(errors.values()),
            "passed": max(errors.values()) <= tol,
        }
    if "mltp_full" in report and "mltp_fo" in report:
        full = np.concatenate([np.ravel(t) for g in report["mltp_full"]["w"] for t in g])
        fo = np.concatenate([np.ravel(t) for g in report["mltp_fo"]["w"] for t in g])
        report["fo_gap"] = float(np.max(np.abs(full - fo)))
    return report


def _first_pair(cfg, train, size):
    batch = train.batch(np.arange(min(size, len(train)) // 2 * 2))
    return D.split_task_pair(batch)


def run_gradcheck(cfg, cap=500, tol=1e-4, step=1e-5, alpha_scale=None, emit=print):
    """Gradient verification of every MLTP variant for the configured network."""
    spec = cfg.network_spec()
    if spec.num_params() > cap:
        raise ConfigError(f"gradcheck needs at most {cap} parameters; network has "
                          f"{spec.num_params()}")
    train, _ = load_datasets(cfg)
    train = train.astype(np.float64)
    seed = cfg.seeds[0]
    init = tuple(cfg.init) if isinstance(cfg.init, list) else cfg.init
    params = init_params(spec, init, seed=_seed_int(seed, "init"), dtype=np.float64)
    alpha = AlphaSet.init(len(params), cfg.alpha.mean, cfg.alpha.std, seed=_seed_int(seed, "alpha"))
    if alpha_scale is not None:
        alpha = AlphaSet.constant(len(params), alpha_scale, learnable=True)
    pair = _first_pair(cfg, train, min(cfg.batch_size, 32))
    o = cfg.objective
    with ad.deterministic(True):
        report = gradcheck_variants(spec, params, alpha, pair, o.eta, o.beta, step=step, tol=tol)
    for variant in ("mltp_full", "mltp_conv", "mltp_fc", "mltp_fo"):
        r = report[variant]
        for name, err in r["errors"].items():
            emit(f"{variant:10s} {name:8s} max rel err {err:.3e} "
                 f"{'PASS' if err <= tol else 'FAIL'}")
    if "fo_gap" in report:
        emit(f"full vs first-order w-gradient gap {report['fo_gap']:.6g}")
    report["passed"] = all(report[v]["passed"] for v in ("mltp_full", "mltp_conv", "mltp_fc",
                                                         "mltp_fo"))
    return report


# ---------------------------------------------------------------- taylor scan

def taylor_scan(spec, params, pair, eta, scales, direction=None, seeds=(11, 12),
                lo=3.5, hi=4.5):
    """``|J - J_taylor|`` for ``alpha = s * direction`` over ``scales``.

    ``ratios[k]`` is ``residual[k] / residual[k+1]``; the scan passes when
    every ratio between halving scales lies in ``[lo, hi]``.
    """
    params = params.astype(np.float64)
    n = len(params)
    direction = np.ones(n) if direction is None else np.asarray(direction, dtype=np.float64)
    config = ObjectiveConfig("mltp_full", eta, 0.0)
    rows = []
    for s in scales:
        alpha = AlphaSet(s * direction, learnable=False)
        exact = mltp_objective(spec, params, alpha, pair.task_i, pair.task_j, config, seeds).item()
        approx = taylor_objective(spec, params, alpha, pair.task_i, pair.task_j, eta, seeds).item()
        rows.append({"scale": float(s), "exact": exact, "taylor": approx,
                     "residual": abs(exact - approx)})
    ratios = []
    for a, b in zip(rows, rows[1:]):
        ratios.append(a["residual"] / b["residual"] if b["residual"] > 0 else math.nan)
    halving = all(abs(a["scale"] / b["scale"] - 2.0) < 1e-9 for a, b in zip(rows, rows[1:])
                  if b["scale"] != 0)
    passed = bool(ratios) and halving and all(lo <= r <= hi for r in ratios)
    return {"rows": rows, "ratios": ratios, "passed": passed}


def run_taylor_scan(cfg, scales=(1e-2, 5e-3, 2.5e-3), emit=print):
    spec = cfg.network_spec()
    for layer in spec.layers:
        if layer.activation == "relu" and layer.kind in ("conv", "fc"):
            raise ConfigError("taylor-scan needs a relu-free network")
        if layer.kind == "dropout" and layer.p > 0:
            raise ConfigError("taylor-scan needs dropout off")
        if layer.kind == "maxpool":
            raise ConfigError("taylor-scan needs a smooth network (no max-pooling)")
    train, _ = load_datasets(cfg)
    train = train.astype(np.float64)
    seed = cfg.seeds[0]
    init = tuple(cfg.init) if isinstance(cfg.init, list) else cfg.init
    params = init_params(spec, init, seed=_seed_int(seed, "init"), dtype=np.float64)
    pair = _first_pair(cfg, train, cfg.batch_size)
    with ad.deterministic(True):
        report = taylor_scan(spec, params, pair, cfg.objective.eta, scales)
    emit(f"{'scale':>12s} {'exact':>16s} {'taylor':>16s} {'residual':>12s}")
    for row in report["rows"]:
        emit(f"{row['scale']:12.4g} {row['exact']:16.10f} {row['taylor']:16.10f} "
             f"{row['residual']:12.4e}")
    emit("ratios: " + ", ".join(f"{r:.4f}" for r in report["ratios"]))
    emit("PASS" if report["passed"] else "FAIL")
    return report


# ---------------------------------------------------------------- compare

def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def final_accuracy(path):
    rows = read_metrics(path)
    if not rows:
        return math.nan
    return float(rows[-1]["test_acc"])


def collect_results(paths):
    """``{(network, variant): [final accuracy per seed]}`` from run directories.

    Each path is a run directory (holding ``config.json``) or a parent that
    is searched recursively for them. Only metrics files are read.
    """
    cells = {}
    order = []
    run_dirs = []
    for path in paths:
        if os.path.isfile(os.path.join(path, CONFIG_NAME)):
            run_dirs.append(path)
        else:
            found = sorted(glob.glob(os.path.join(path, "**", CONFIG_NAME), recursive=True))
            run_dirs.extend(os.path.dirname(f) for f in found)
    for run_dir in run_dirs:
        with open(os.path.join(run_dir, CONFIG_NAME)) as fh:
            conf = json.load(fh)
        key = (conf["network"]["name"], conf["objective"]["variant"])
        if key not in cells:
            cells[key] = []
            order.append(key)
        for metrics in sorted(glob.glob(os.path.join(run_dir, "metrics_seed*.csv"))):
            acc = final_accuracy(metrics)
            if math.isfinite(acc):
                cells[key].append(acc)
    return {k: cells[k] for k in order}


def cell_stats(values):
    """Mean and population standard deviation (divisor n)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def compare_table(cells):
    """Render ``cells`` as aligned text and CSV; missing cells show ``-``."""
    networks = []
    for net, _ in cells:
        if net not in networks:
            networks.append(net)
    header = ["network"] + [PROCEDURE_TITLES[p] for p in PROCEDURES]
    text_rows = [header]
    csv_lines = ["network," + ",".join(f"{PROCEDURE_TITLES[p]}_mean,{PROCEDURE_TITLES[p]}_std,"
                                       f"{PROCEDURE_TITLES[p]}_n" for p in PROCEDURES)]
    for net in networks:
        row = [net]
        csv_row = [net]
        for p in PROCEDURES:
            values = cells.get((net, p)) or []
            if values:
                m, s = cell_stats(values)
                row.append(f"{m:.2f} ± {s:.2f}")
                csv_row += [repr(m), repr(s), str(len(values))]
            else:
                row.append("-")
                csv_row += ["-", "-", "0"]
        text_rows.append(row)
        csv_lines.append(",".join(csv_row))
    widths = [max(len(r[i]) for r in text_rows) for i in range(len(header))]
    lines = ["# final-epoch test accuracy (%), mean ± population std (divisor n) over seeds"]
    for r in text_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n", "\n".join(csv_lines) + "\n"


def run_compare(paths, out=None, emit=print):
    cells = collect_results(paths)
    if not any(cells.values()):
        raise ConfigError(f"no completed runs found under {', '.join(map(str, paths))}")
    text, table_csv = compare_table(cells)
    emit(text.rstrip("\n"))
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "comparison.txt"), "w") as fh:
            fh.write(text)
        with open(os.path.join(out, "comparison.csv"), "w") as fh:
            fh.write(table_csv)
    return cells, text, table_csv
