"""Training loop, experiment reports, and the ablation suites."""
from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import Config, ConfigError, config_hash, serialize_config
from .data import SyntheticDataset, gen_dataset
from .diffusion import GuidanceSpec, ddim_sample, denoise_loss, make_schedule, q_sample
from .model import build_model, count_parameters
from .optim import Adam
from .tensor import no_grad

REPORT_FIELDS = ("run_id", "suite", "variant", "seed", "epoch",
                 "train_loss", "eval_loss", "fidelity", "step_ms")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    eval_loss: float
    step_ms: float


@dataclass
class ExperimentReport:
    run_id: str
    suite: str
    variant: str
    seed: int
    config_text: str
    epochs: list = field(default_factory=list)
    fidelity: float = float("nan")
    param_counts: dict = field(default_factory=dict)

    @property
    def final_eval_loss(self) -> float:
        return self.epochs[-1].eval_loss if self.epochs else float("nan")

    def rows(self):
        for i, e in enumerate(self.epochs):
            last = i == len(self.epochs) - 1
            yield {
                "run_id": self.run_id, "suite": self.suite, "variant": self.variant,
                "seed": self.seed, "epoch": e.epoch,
                "train_loss": repr(e.train_loss) if np.isfinite(e.train_loss) else "",
                "eval_loss": repr(e.eval_loss),
                "fidelity": repr(self.fidelity) if last and np.isfinite(self.fidelity) else "",
                "step_ms": f"{e.step_ms:.3f}",
            }


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _eval_pack(images: np.ndarray, run, schedule):
    """Fixed (t, eps) grid over the held-out set, shared by every arm.

    Deterministic from data_seed so eval losses are comparable across
    variants and reproducible across reruns.
    """
    n = images.shape[0]
    ts = np.linspace(0, schedule.timesteps - 1, run.eval_points).round().astype(np.int64)
    rng = _stream(run.data_seed, 0xE7A1)
    eps = rng.standard_normal((run.eval_points, *images.shape)).astype(np.float32)
    return ts, eps


def _eval_loss(model, images, labels, ts, eps, schedule, batch: int) -> float:
    total, count = 0.0, 0
    with no_grad():
        for k, t in enumerate(ts):
            tb = np.full(images.shape[0], t, dtype=np.int64)
            x_t = q_sample(images, tb, eps[k], schedule)
            for lo in range(0, images.shape[0], batch):
                hi = lo + batch
                pred = model(x_t[lo:hi], labels[lo:hi], tb[lo:hi]).numpy()
                total += float(((pred - eps[k, lo:hi]) ** 2).sum())
                count += pred.size
    return total / count


def sample_fidelity(model, dataset: SyntheticDataset, run, schedule, seed: int) -> float:
    """Mean L2 distance from conditionally generated samples to their class template."""
    labels = np.repeat(np.arange(dataset.n_classes), run.samples_per_class)
    guide = GuidanceSpec(run.guidance, model.cfg.n_classes)
    x = ddim_sample(model, labels, schedule, run.sample_steps, guide,
                    _stream(seed, 0x5A11), model.cfg.image_size)
    dists = np.linalg.norm((x - dataset.templates[labels]).reshape(len(labels), -1), axis=1)
    return float(dists.mean())


def run_train(cfg: Config, dataset: SyntheticDataset, seed: int,
              suite: str = "single", variant: str = "default",
              epochs: int | None = None, compute_fidelity: bool = True) -> ExperimentReport:
    """Train one arm and record per-epoch train/held-out losses."""
    cfg.validate()
    run = cfg.run
    n_epochs = run.epochs if epochs is None else epochs
    schedule = make_schedule(run.timesteps, run.beta_start, run.beta_end)
    model = build_model(cfg.model, seed, max_timestep=run.timesteps)
    train_x, train_y, hold_x, hold_y = dataset.split(run.holdout_per_class)
    ts_eval, eps_eval = _eval_pack(hold_x, run, schedule)

    report = ExperimentReport(
        run_id=f"{config_hash(cfg)}-{seed}", suite=suite, variant=variant, seed=seed,
        config_text=serialize_config(cfg), param_counts=count_parameters(model),
    )
    opt = Adam(model.parameters(), lr=run.lr)
    rng = _stream(seed, 0x7EA1)

    for epoch in range(n_epochs):
        # fixed two-phase schedule, identical for every arm: final quarter at 0.3x
        opt.lr = run.lr * (0.3 if epoch >= 0.75 * n_epochs else 1.0)
        order = rng.permutation(train_x.shape[0])
        losses = []
        t0 = time.perf_counter()
        n_steps = 0
        for lo in range(0, len(order), run.batch_size):
            idx = order[lo : lo + run.batch_size]
            loss = denoise_loss(model, train_x[idx], train_y[idx], schedule, rng, run.p_null)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} (run {report.run_id}, epoch {epoch}, step {n_steps})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            n_steps += 1
        step_ms = (time.perf_counter() - t0) * 1e3 / max(n_steps, 1)
        eval_loss = _eval_loss(model, hold_x, hold_y, ts_eval, eps_eval, schedule, run.batch_size)
        report.epochs.append(EpochRow(epoch, float(np.mean(losses)), eval_loss, step_ms))

    if n_epochs == 0:
        eval_loss = _eval_loss(model, hold_x, hold_y, ts_eval, eps_eval, schedule, run.batch_size)
        report.epochs.append(EpochRow(0, float("nan"), eval_loss, 0.0))
    if compute_fidelity:
        report.fidelity = sample_fidelity(model, dataset, run, schedule, seed)
    report.model = model
    return report


# -- ablation suites -----------------------------------------------------------


def _set_model(cfg: Config, **kw) -> Config:
    return Config(model=replace(cfg.model, **kw), run=cfg.run)


def suite_variants(suite: str, base: Config):
    """(variant-name, config) pairs for one ablation suite."""
    m = base.model
    if suite == "module-sets":
        rows = [
            ("baseline", frozenset()),
            ("dw", frozenset({"dw-conv"})),
            ("dw+patch", frozenset({"dw-conv", "patch-embed"})),
            ("dw+patch+head", frozenset({"dw-conv", "patch-embed", "head"})),
            ("dw+patch+outproj", frozenset({"dw-conv", "patch-embed", "out-proj"})),
        ]
        return [(name, _set_model(base, cond_aware_set=s, control_method=frozenset({"CAN"})))
                for name, s in rows]
    if suite == "condition-sources":
        rows = [("timestep-only", frozenset({"timestep"})),
                ("class-only", frozenset({"class"})),
                ("all", frozenset({"class", "timestep"}))]
        return [(name, _set_model(base, condition_sources=s)) for name, s in rows]
    if suite == "control-methods":
        rows = [("adanorm", dict(control_method=frozenset({"AdaNorm"}), cond_aware_set=frozenset())),
                ("condtokens", dict(control_method=frozenset({"CondTokens"}), cond_aware_set=frozenset())),
                ("can", dict(control_method=frozenset({"CAN"}))),
                ("can+adanorm", dict(control_method=frozenset({"CAN", "AdaNorm"}))),
                ("can+condtokens", dict(control_method=frozenset({"CAN", "CondTokens"})))]
        return [(name, _set_model(base, **kw)) for name, kw in rows]
    if suite == "can-vs-aks":
        return [("can", _set_model(base, weight_adapter="generator")),
                ("aks", _set_model(base, weight_adapter="kernel-bank"))]
    raise ConfigError(f"unknown suite '{suite}' (valid: module-sets, condition-sources, "
                      f"control-methods, can-vs-aks)")


def worker_count() -> int:
    cap = os.environ.get("CANF_THREADS")
    return max(1, int(cap)) if cap else 1


def run_ablation(suite: str, base: Config, seeds, dataset: SyntheticDataset | None = None,
                 epochs: int | None = None) -> list[ExperimentReport]:
    """One run per (variant, seed); all arms share the dataset and eval pack.

    A failing arm is recorded as a report with an `error` attribute instead of
    killing the rest of the suite.
    """
    variants = suite_variants(suite, base)
    if dataset is None:
        dataset = gen_dataset(base.run.data_seed, base.model.n_classes, base.run.n_per_class,
                              base.model.image_size)

    jobs = [(name, cfg, seed) for name, cfg in variants for seed in seeds]

    def one(job):
        name, cfg, seed = job
        try:
            return run_train(cfg, dataset, seed, suite=suite, variant=name, epochs=epochs)
        except TrainingDiverged as e:
            rep = ExperimentReport(run_id=f"{config_hash(cfg)}-{seed}", suite=suite,
                                   variant=name, seed=seed, config_text=serialize_config(cfg))
            rep.error = str(e)
            return rep

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def median_final_losses(reports) -> dict:
    """variant -> median over seeds of the final held-out loss."""
    by_variant = {}
    for r in reports:
        if r.epochs:
            by_variant.setdefault(r.variant, []).append(r.final_eval_loss)
    return {k: float(np.median(v)) for k, v in by_variant.items()}


# -- report emission --------------------------------------------------------------


def write_reports_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for r in reports:
            for row in r.rows():
                writer.writerow(row)


def write_reports_jsonl(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            for row in r.rows():
                rec = dict(row)
                rec["train_loss"] = None if rec["train_loss"] == "" else float(rec["train_loss"])
                rec["eval_loss"] = float(rec["eval_loss"])
                rec["fidelity"] = None if rec["fidelity"] == "" else float(rec["fidelity"])
                rec["step_ms"] = float(rec["step_ms"])
                fh.write(json.dumps(rec) + "\n")


def reports_table(reports) -> str:
    """Human-readable comparison: one line per (variant, seed) plus medians."""
    buf = io.StringIO()
    buf.write(f"{'variant':<20} {'seed':>4} {'final eval':>12} {'fidelity':>10} {'params':>9}\n")
    for r in reports:
        err = getattr(r, "error", None)
        if err:
            buf.write(f"{r.variant:<20} {r.seed:>4} {'FAILED':>12} {err}\n")
            continue
        buf.write(f"{r.variant:<20} {r.seed:>4} {r.final_eval_loss:>12.6f} "
                  f"{r.fidelity:>10.4f} {r.param_counts.get('total', 0):>9}\n")
    med = median_final_losses(reports)
    for name, value in med.items():
        buf.write(f"median[{name}] = {value:.6f}\n")
    return buf.getvalue()
