"""Experiment orchestration: training loop, run-directory artifacts, resume.

A run directory holds the effective config echo, per-epoch metrics, the
recorded parameter chain and its ESS report, parameter snapshots, the
posterior-predictive CSVs and a binary checkpoint. Every artifact except
run.log (which carries wall-clock timings) is byte-deterministic given
(config, seed).
"""

import math
import os
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from . import data as datasets
from . import diagnostics, evaluate, samplers
from .checkpoint import CheckpointState, read_checkpoint, write_checkpoint
from .config import ConfigError, format_config, load_config
from .kfac import KfacState
from .net import loss_and_grad, reference_network
from .rng import stream

DATA_ROOT_ENV = "LANGBENCH_DATA_ROOT"
EVAL_BATCH = 256


class RuntimeAbort(RuntimeError):
    """Training aborted (non-finite loss); a checkpoint of the last finite
    state has been written."""


class RunLog:
    def __init__(self, path):
        self.path = Path(path)

    def __call__(self, message):
        stamp = datetime.now().isoformat(timespec="seconds")
        with open(self.path, "a") as fh:
            fh.write(f"{stamp} | {message}\n")


def resolve_path(path):
    """Make a config data path absolute, honoring the data-root override."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return p


def _require_file(path, key):
    p = resolve_path(path)
    if not p.is_file():
        raise ConfigError(f"key '{key}': file not found: {p}")
    return p


def load_datasets(cfg, log=None):
    """(train, test, ood-or-None) per the config's data source."""
    note = log or (lambda msg: None)
    if cfg.data_source == "synthetic":
        train = datasets.synthetic(cfg.synthetic_n, cfg.synthetic_classes,
                                   cfg.synthetic_side, cfg.seed, variant="train")
        test = datasets.synthetic(cfg.synthetic_test_n, cfg.synthetic_classes,
                                  cfg.synthetic_side, cfg.seed, variant="test")
        ood = None
        if cfg.synthetic_ood:
            ood = datasets.synthetic(cfg.synthetic_test_n, cfg.synthetic_classes,
                                     cfg.synthetic_side, cfg.seed, variant="ood")
    else:
        train = datasets.load_dataset(
            _require_file(cfg.data_train_images, "data.train_images"),
            _require_file(cfg.data_train_labels, "data.train_labels"), name="train")
        test = datasets.load_dataset(
            _require_file(cfg.data_test_images, "data.test_images"),
            _require_file(cfg.data_test_labels, "data.test_labels"), name="test")
        ood = None
    if cfg.data_ood_images is not None:
        images_path = _require_file(cfg.data_ood_images, "data.ood_images")
        _, images = datasets.load_idx(images_path)
        if cfg.data_ood_labels is not None:
            _, labels = datasets.load_idx(_require_file(cfg.data_ood_labels, "data.ood_labels"))
        else:
            labels = np.zeros(len(images), dtype=np.int64)
        ood = datasets.Dataset(images, labels, name=str(images_path))
    if cfg.data_truncate is not None:
        train = datasets.truncate(train, cfg.data_truncate, cfg.seed)
        note(f"truncated train set to {len(train)} examples; "
             f"label histogram {datasets.label_histogram(train)}")
    return train, test, ood


def build_network(cfg, image_shape, classes):
    return reference_network(input_shape=(1, *image_shape),
                             conv_channels=cfg.arch_conv_channels,
                             dense_units=cfg.arch_dense_units,
                             classes=classes,
                             filter_size=cfg.arch_filter_size,
                             pool=cfg.arch_pool)


def build_schedule(cfg):
    if cfg.schedule_kind == "constant":
        return samplers.Schedule(kind="constant", a=cfg.schedule_a)
    return samplers.Schedule(kind="poly", a=cfg.schedule_a, b=cfg.schedule_b,
                             gamma=cfg.schedule_gamma)


def _build_precond(cfg, net):
    if cfg.kind == "PSGLD":
        return samplers.RmspropState(net.num_params, cfg.rmsprop_alpha, cfg.rmsprop_epsilon)
    if cfg.kind == "KSGLD":
        return KfacState(net, damping=cfg.kfac_damping, decay=cfg.kfac_decay,
                         max_staleness=cfg.kfac_refresh_every)
    return None


def point_accuracy(net, theta, dataset, batch_size=EVAL_BATCH):
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        logits, _ = net.forward(theta, dataset.batch_input(sl))
        correct += int(np.sum(logits.argmax(axis=1) == dataset.labels[sl]))
    return correct / len(dataset)


def _write_metrics(path, rows):
    with open(path, "w") as fh:
        fh.write("epoch,step,train_loss,test_accuracy,lambda\n")
        for epoch, step, loss, acc, lam in rows:
            fh.write(f"{int(epoch)},{int(step)},{float(loss)!r},{float(acc)!r},{float(lam)!r}\n")


def _write_mess_by_epoch(path, chain, steps_per_epoch, epochs):
    """Cumulative-prefix mESS per epoch (the mixing-over-training curve)."""
    values = chain.values
    steps = np.asarray(chain.steps)
    with open(path, "w") as fh:
        fh.write("epoch,n_records,mess\n")
        for epoch in range(epochs):
            mask = steps < (epoch + 1) * steps_per_epoch
            n = int(mask.sum())
            if n >= 10:
                try:
                    report = diagnostics.mess(values[mask])
                    value = repr(report.mess)
                except diagnostics.DegenerateSeriesError:
                    value = "nan"
            else:
                value = "nan"
            fh.write(f"{epoch},{n},{value}\n")


def _pack_state(cfg, net, theta, precond, chain, ensemble, metrics, step, epoch):
    arrays = {
        "theta": theta,
        "chain.indices": chain.indices,
        "chain.steps": np.asarray(chain.steps, dtype=np.int64),
        "chain.values": chain.values,
        "metrics": np.asarray(metrics, dtype=np.float64).reshape(len(metrics), 5),
    }
    thetas, steps, lambdas = ensemble.as_arrays()
    arrays["snap.thetas"] = thetas.reshape(len(ensemble), net.num_params)
    arrays["snap.steps"] = steps
    arrays["snap.lambdas"] = lambdas
    if precond is not None:
        for name, arr in precond.state_arrays().items():
            arrays[f"sampler.{name}"] = arr
    return CheckpointState(step=step, epoch=epoch, seed=cfg.seed, kind=cfg.kind, arrays=arrays)


def _unpack_state(state, cfg, net, precond):
    if state.kind != cfg.kind or state.seed != cfg.seed:
        raise ConfigError(f"checkpoint was written by kind={state.kind} seed={state.seed}, "
                          f"config says kind={cfg.kind} seed={cfg.seed}")
    theta = state.arrays["theta"]
    chain = diagnostics.Chain(state.arrays["chain.indices"], cfg.diag_stride, net.num_params)
    chain.steps = [int(s) for s in state.arrays["chain.steps"]]
    chain._rows = list(state.arrays["chain.values"])
    ensemble = evaluate.SnapshotEnsemble.from_arrays(
        state.arrays["snap.thetas"], state.arrays["snap.steps"], state.arrays["snap.lambdas"])
    metrics = [tuple(row) for row in state.arrays["metrics"]]
    if precond is not None:
        prefix = "sampler."
        precond.load_arrays({k[len(prefix):]: v for k, v in state.arrays.items()
                             if k.startswith(prefix)})
    return theta, chain, ensemble, metrics, state.step, state.epoch


def run_experiment(cfg, resume=False):
    """Execute one experiment; returns the run directory path."""
    if cfg.out_dir is None:
        raise ConfigError("key 'out_dir': required (set it in the config or pass --out)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "run.log")
    (out / "config.txt").write_text(format_config(cfg))

    train, test, ood = load_datasets(cfg, log)
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    net = build_network(cfg, train.image_shape, classes)
    from ._kernels import BACKEND
    log(f"start kind={cfg.kind} seed={cfg.seed} params={net.num_params} "
        f"train={len(train)} test={len(test)} kernel_backend={BACKEND}")

    schedule = build_schedule(cfg)
    precond = _build_precond(cfg, net)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    burnin_step = int(total_steps * cfg.burnin_fraction)
    noise_mode = cfg.kfac_noise_mode

    ckpt_path = out / "checkpoint.bin"
    if resume and ckpt_path.exists():
        theta, chain, ensemble, metrics, t, start_epoch = _unpack_state(
            read_checkpoint(ckpt_path), cfg, net, precond)
        log(f"resumed from checkpoint at epoch {start_epoch}, step {t}")
    else:
        theta = net.init_params(stream(cfg.seed, "init"))
        indices = diagnostics.tracked_indices(net, cfg.diag_coords, cfg.seed)
        chain = diagnostics.Chain(indices, cfg.diag_stride, net.num_params)
        ensemble = evaluate.SnapshotEnsemble(net.num_params)
        metrics = []
        t, start_epoch = 0, 0

    n_train = len(train)
    for epoch in range(start_epoch, cfg.epochs):
        tic = time.perf_counter()
        epoch_losses = []
        plan = datasets.BatchPlan(cfg.batch_size, cfg.seed, epoch)
        for xb, yb in datasets.batches(train, plan):
            loss, grads_mean, cache = loss_and_grad(net, theta, xb, yb)
            if not np.isfinite(loss):
                write_checkpoint(ckpt_path, _pack_state(
                    cfg, net, theta, precond, chain, ensemble, metrics, t, epoch))
                log(f"abort: non-finite loss at step {t}")
                raise RuntimeAbort(f"non-finite loss at step {t}")
            epoch_losses.append(loss)
            ascent = -n_train * grads_mean + samplers.prior_grad(theta, cfg.prior_precision)
            if cfg.kind == "PSGLD":
                precond.update(grads_mean)
            elif cfg.kind == "KSGLD":
                precond.update_factors(cache)
                if (precond.updates_since_refresh is None
                        or precond.updates_since_refresh >= cfg.kfac_refresh_every):
                    precond.invert_factors()
                    if noise_mode == "inverse-sqrt":
                        precond.factor_sqrt()
            theta = samplers.step(cfg.kind, theta, ascent, schedule, t,
                                  stream(cfg.seed, "noise", t), precond, noise_mode)
            if t % cfg.diag_stride == 0:
                chain.record(theta, t)
            if t >= burnin_step and (t - burnin_step) % cfg.snapshot_stride == 0 \
                    and len(ensemble) < cfg.snapshot_max:
                ensemble.append(theta, t, schedule.rate(t))
            t += 1
        test_acc = point_accuracy(net, theta, test)
        lam = schedule.rate(max(t - 1, 0))
        metrics.append((epoch, t, float(np.mean(epoch_losses)), test_acc, lam))
        write_checkpoint(ckpt_path, _pack_state(
            cfg, net, theta, precond, chain, ensemble, metrics, t, epoch + 1))
        log(f"epoch {epoch}: loss {np.mean(epoch_losses):.4f} "
            f"test_acc {test_acc:.4f} wall {time.perf_counter() - tic:.2f}s")

    if len(ensemble) == 0:
        ensemble.append(theta, t, schedule.rate(max(t - 1, 0)))

    _write_metrics(out / "metrics.csv", metrics)
    chain.write_csv(out / "chain.csv")
    _write_mess_by_epoch(out / "mess_by_epoch.csv", chain, steps_per_epoch, cfg.epochs)
    _write_ess(out, chain, cfg, log)

    snaps, snap_steps, snap_lams = ensemble.as_arrays()
    write_checkpoint(out / "snapshots.bin", CheckpointState(
        step=t, epoch=cfg.epochs, seed=cfg.seed, kind=cfg.kind,
        arrays={"snap.thetas": snaps, "snap.steps": snap_steps, "snap.lambdas": snap_lams}))

    summary = evaluate.posterior_predict(net, ensemble, test.batch_input(), test.labels)
    summary.write_csv(out / "predictions.csv", test.labels)
    log(f"posterior predictive: {len(ensemble)} snapshots, test accuracy {summary.accuracy:.4f}")

    if cfg.attack_enabled:
        run_attack(out, cfg.attack_epsilon, net=net, ensemble=ensemble, test=test, log=log)
    if ood is not None:
        run_ood(out, ood, net=net, ensemble=ensemble, log=log)
    log("done")
    return out


def _write_ess(out, chain, cfg, log):
    values = chain.values
    start = diagnostics.burnin_slice(len(values), cfg.burnin_fraction)
    kept = values[start:]
    path = out / "ess.csv"
    if kept.shape[0] < 10:
        path.write_text("coordinate,ess,lag\n")
        log(f"ess skipped: only {kept.shape[0]} post-burn-in records (need 10)")
        return None
    report = diagnostics.mess(kept, coordinates=chain.indices)
    report.write_csv(path)
    log(f"mESS {report.mess:.2f} over n={report.n} records, p={report.p} coordinates "
        f"(mESS/n {report.mess / report.n:.4f})")
    return report


# -- post-hoc verbs ---------------------------------------------------------


def load_run(run_dir):
    """Reload (config, net, ensemble, train, test, ood) from a run directory."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.txt"
    if not cfg_path.is_file():
        raise ConfigError(f"{run_dir} has no config.txt; not a run directory?")
    cfg, _ = load_config(cfg_path)
    train, test, ood = load_datasets(cfg)
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    net = build_network(cfg, train.image_shape, classes)
    snap_path = run_dir / "snapshots.bin"
    if not snap_path.is_file():
        raise ConfigError(f"{snap_path} missing; run the experiment first")
    state = read_checkpoint(snap_path)
    ensemble = evaluate.SnapshotEnsemble.from_arrays(
        state.arrays["snap.thetas"], state.arrays["snap.steps"], state.arrays["snap.lambdas"])
    return cfg, net, ensemble, train, test, ood


def run_diagnose(run_dir):
    """Recompute the ESS report from a run's recorded chain."""
    run_dir = Path(run_dir)
    chain_path = run_dir / "chain.csv"
    if not chain_path.is_file():
        raise ConfigError(f"{chain_path} missing; run the experiment first")
    cfg, _ = load_config(run_dir / "config.txt")
    chain = diagnostics.Chain.read_csv(chain_path)
    return _write_ess(run_dir, chain, cfg, RunLog(run_dir / "run.log"))


def run_attack(run_dir, epsilon, net=None, ensemble=None, test=None, log=None):
    """FGSM evaluation; writes adversarial prediction and summary CSVs."""
    run_dir = Path(run_dir)
    if net is None:
        _, net, ensemble, _, test, _ = load_run(run_dir)
    log = log or RunLog(run_dir / "run.log")
    x, labels = test.batch_input(), test.labels
    clean = evaluate.posterior_predict(net, ensemble, x, labels)
    rows = []
    correct = 0
    for start in range(0, len(test), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        x_adv = evaluate.fgsm(net, ensemble, x[sl], labels[sl], epsilon)
        part = evaluate.posterior_predict(net, ensemble, x_adv, labels[sl])
        correct += int(np.sum(part.predictions == labels[sl]))
        rows.append(part)
    adv_acc = correct / len(test)
    with open(run_dir / "adversarial.csv", "w") as fh:
        fh.write("example,label,prediction,max_prob\n")
        i = 0
        for part in rows:
            for pred, mp in zip(part.predictions, part.max_prob):
                fh.write(f"{i},{int(labels[i])},{int(pred)},{float(mp)!r}\n")
                i += 1
    with open(run_dir / "adversarial_summary.csv", "w") as fh:
        fh.write("epsilon,clean_accuracy,adversarial_accuracy\n")
        fh.write(f"{float(epsilon)!r},{float(clean.accuracy)!r},{float(adv_acc)!r}\n")
    log(f"fgsm eps={epsilon}: clean {clean.accuracy:.4f} -> adversarial {adv_acc:.4f}")
    return clean.accuracy, adv_acc


def run_ood(run_dir, ood=None, images_path=None, labels_path=None,
            net=None, ensemble=None, log=None):
    """OOD confidence histogram; writes ood_hist.csv and ood_summary.csv."""
    run_dir = Path(run_dir)
    if net is None:
        _, net, ensemble, _, _, run_ood_set = load_run(run_dir)
        if ood is None:
            ood = run_ood_set
    if images_path is not None:
        kind, images = datasets.load_idx(resolve_path(images_path))
        if kind != "images":
            raise ConfigError(f"{images_path} holds labels, expected images")
        labels = np.zeros(len(images), dtype=np.int64)
        if labels_path is not None:
            _, labels = datasets.load_idx(resolve_path(labels_path))
        ood = datasets.Dataset(images, labels, name=str(images_path))
    if ood is None:
        raise ConfigError("no OOD dataset: pass an images path or configure one")
    log = log or RunLog(run_dir / "run.log")
    report = evaluate.ood_max_prob(net, ensemble, ood.batch_input())
    report.write_csv(run_dir / "ood_hist.csv")
    with open(run_dir / "ood_summary.csv", "w") as fh:
        fh.write("mean_max_prob,median_max_prob,examples\n")
        fh.write(f"{float(report.mean)!r},{float(report.median)!r},{len(ood)}\n")
    log(f"ood: mean max-prob {report.mean:.4f}, median {report.median:.4f} "
        f"over {len(ood)} examples")
    return report


def _run_dirs(path):
    path = Path(path)
    if (path / "metrics.csv").is_file():
        return [path]
    subs = sorted(d for d in path.iterdir() if (d / "metrics.csv").is_file())
    if not subs:
        raise ConfigError(f"{path}: no metrics.csv here or in subdirectories")
    return subs


def run_plots(path):
    """Assemble tidy per-figure CSVs from one run or a suite of runs."""
    path = Path(path)
    runs = _run_dirs(path)
    plots = path / "plots"
    plots.mkdir(exist_ok=True)
    acc_rows, mess_rows, ood_rows, table_rows = [], [], [], []
    for run in runs:
        cfg, _ = load_config(run / "config.txt")
        with open(run / "metrics.csv") as fh:
            fh.readline()
            for line in fh:
                epoch, step, _, acc, _ = line.rstrip("\n").split(",")
                acc_rows.append((cfg.kind, epoch, step, acc))
        mess_path = run / "mess_by_epoch.csv"
        if mess_path.is_file():
            with open(mess_path) as fh:
                fh.readline()
                for line in fh:
                    epoch, n, value = line.rstrip("\n").split(",")
                    mess_rows.append((cfg.kind, epoch, n, value))
        hist = run / "ood_hist.csv"
        if hist.is_file():
            with open(hist) as fh:
                fh.readline()
                for line in fh:
                    ood_rows.append((cfg.kind, *line.rstrip("\n").split(",")))
        summary = run / "adversarial_summary.csv"
        if summary.is_file():
            with open(summary) as fh:
                fh.readline()
                eps, clean, adv = fh.readline().rstrip("\n").split(",")
                table_rows.append((cfg.kind, eps, clean, adv))
    with open(plots / "accuracy_curve.csv", "w") as fh:
        fh.write("sampler,epoch,step,test_accuracy\n")
        for row in acc_rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    with open(plots / "mess_curve.csv", "w") as fh:
        fh.write("sampler,epoch,n_records,mess\n")
        for row in mess_rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    if ood_rows:
        with open(plots / "ood_histogram.csv", "w") as fh:
            fh.write("sampler,bin_left,bin_right,count\n")
            for row in ood_rows:
                fh.write(",".join(str(v) for v in row) + "\n")
    if table_rows:
        with open(plots / "adversarial_table.csv", "w") as fh:
            fh.write("sampler,epsilon,clean_accuracy,adversarial_accuracy\n")
            for row in table_rows:
                fh.write(",".join(str(v) for v in row) + "\n")
    return plots
