"""LOSO pre-training, incremental fine-tuning and evaluation."""
from __future__ import annotations

import itertools
import json
import logging
import statistics
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import models as M
from .autodiff import Optimizer
from .conditioning import add_subject, normalize_table
from .dsp import EpochSet, Scaler, apply_scaler, crop_window, fit_scaler, preprocess
from .errors import ConfigurationError, DataError, InternalError, NumericError
from .losses import LossConfig, make_loss, undersample_indices
from .metrics import MetricsReport, confusion, mcc, report

log = logging.getLogger(__name__)

VAL_FRACTION = 0.08
N_BATCHES = 10
BATCH_SIZE = 60
FINETUNE_POOL = 4          # fine-tune subsets are drawn from the first 4 batches
EPOCH_TMAX = 0.6           # longest window; shorter ones are cropped from it


@dataclass
class TrainConfig:
    lr_initial: float = 1e-3
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    patience: int = 10
    max_epochs: int = 200
    batch_size: int = 120
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    conditioning: str = "none"
    optimizer: str = "adam"
    scaler: str = "standard"
    finetune_lr: float = 5e-4
    finetune_patience: int = 5
    finetune_max_epochs: int = 200
    zero_shot_init: str = "mean"
    subset_mode: str = "subsets"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.conditioning not in ("none", "projection", "film"):
            raise ConfigurationError(f"unknown conditioning mode {self.conditioning!r}")
        if self.subset_mode not in ("subsets", "permutations"):
            raise ConfigurationError(f"unknown subset_mode {self.subset_mode!r}")
        if self.lr_initial <= 0 or self.finetune_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 2:
            raise ConfigurationError("patience, max_epochs must be >= 1 and batch_size >= 2")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        return self.lr_initial / self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    arch: M.ArchitectureConfig = field(default_factory=M.ArchitectureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    increments: tuple = (1, 2, 3, 4)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            name=d.get("name", "experiment"),
            arch=M.ArchitectureConfig(**d.get("arch", {})),
            train=TrainConfig(**d.get("train", {})),
            increments=tuple(d.get("increments", (1, 2, 3, 4))),
        )

    def to_dict(self):
        d = asdict(self)
        d["increments"] = list(self.increments)
        return d


# --- data and plans ------------------------------------------------------------

def prepare_dataset(recordings) -> EpochSet:
    """Filter, epoch and resample every recording into one epoch pool."""
    sets = []
    for rec in recordings:
        es, rep = preprocess(rec, tmax=EPOCH_TMAX)
        if rep.dropped:
            log.warning("%s/%s: dropped %d events", rec.subject_id, rec.session_id, rep.dropped)
        sets.append(es)
    return EpochSet.concat(sets)


@dataclass
class FoldPlan:
    held_out: str
    train: np.ndarray
    val: np.ndarray
    finetune_batches: list
    test_batches: list

    @property
    def fold_id(self) -> str:
        return f"fold-{self.held_out}"

    @property
    def finetune(self) -> np.ndarray:
        return np.concatenate(self.finetune_batches)

    @property
    def test(self) -> np.ndarray:
        return np.concatenate(self.test_batches)


def _stable_seed(*parts) -> list[int]:
    return [zlib.crc32(str(p).encode()) if not isinstance(p, (int, np.integer)) else int(p) for p in parts]


def _stratified_val(idx, labels, rng):
    val = []
    for c in (0, 1):
        pool = idx[labels[idx] == c]
        n_val = int(round(VAL_FRACTION * len(pool)))
        val.append(rng.choice(pool, size=n_val, replace=False))
    val = np.sort(np.concatenate(val))
    return np.setdiff1d(idx, val), val


def _halves(idx, labels, order):
    """Split a session's epochs temporally so each half holds half of each class."""
    first, second = [], []
    for c in (0, 1):
        pool = idx[labels[idx] == c]
        pool = pool[np.argsort(order[pool], kind="stable")]
        cut = len(pool) // 2
        first.append(pool[:cut])
        second.append(pool[cut:])
    return np.concatenate(first), np.concatenate(second)


def _batches(idx, labels, order_key, n_batches=N_BATCHES):
    """Stratified, temporally ordered batches: batch i gets the i-th chunk of each class."""
    chunks = []
    for c in (0, 1):
        pool = idx[labels[idx] == c]
        pool = pool[np.argsort(order_key[pool], kind="stable")]
        chunks.append(np.array_split(pool, n_batches))
    out = [np.sort(np.concatenate([chunks[0][i], chunks[1][i]])) for i in range(n_batches)]
    sizes = {len(b) for b in out}
    if sizes != {BATCH_SIZE}:
        log.warning("held-out batches have sizes %s rather than %d", sorted(sizes), BATCH_SIZE)
    return out


def make_fold_plans(es: EpochSet, seed: int = 0) -> list[FoldPlan]:
    subjects = sorted(set(es.subject_ids.tolist()))
    if len(subjects) < 2:
        raise DataError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    all_idx = np.arange(len(es))
    # temporal order key across sessions: sessions in name order, then event position
    session_rank = {s: i for i, s in enumerate(sorted(set(es.session_ids.tolist())))}
    order = np.array([session_rank[s] for s in es.session_ids]) * 10**9 + es.event_index
    plans = []
    for subj in subjects:
        mine = all_idx[es.subject_ids == subj]
        sessions = sorted(set(es.session_ids[mine].tolist()))
        if len(sessions) < 2:
            log.warning("subject %s has %d session(s); not used as held-out", subj, len(sessions))
            continue
        if len(sessions) > 2:
            log.warning("subject %s: using sessions %s of %s", subj, sessions[:2], sessions)
        a = mine[es.session_ids[mine] == sessions[0]]
        b = mine[es.session_ids[mine] == sessions[1]]
        a1, a2 = _halves(a, es.labels, es.event_index)
        b1, b2 = _halves(b, es.labels, es.event_index)
        # counterbalance fatigue: first half of A with second half of B
        ft = np.concatenate([a1, b2])
        te = np.concatenate([a2, b1])
        rest = all_idx[es.subject_ids != subj]
        rng = np.random.default_rng(_stable_seed(seed, subj))
        train, val = _stratified_val(rest, es.labels, rng)
        plans.append(FoldPlan(subj, train, val, _batches(ft, es.labels, order), _batches(te, es.labels, order)))
    if not plans:
        raise DataError("no subject has two sessions; nothing to hold out")
    return plans


def check_plan(plan: FoldPlan, es: EpochSet) -> None:
    """Leakage and batch-accounting assertions; raises InternalError on violation."""
    pool = np.concatenate([plan.train, plan.val])
    if plan.held_out in set(es.subject_ids[pool].tolist()):
        raise InternalError(f"{plan.fold_id}: held-out subject present in train/val")
    if np.intersect1d(plan.train, plan.val).size:
        raise InternalError(f"{plan.fold_id}: train and val overlap")
    expected = np.flatnonzero(es.subject_ids != plan.held_out)
    if not np.array_equal(np.sort(pool), expected):
        raise InternalError(f"{plan.fold_id}: train+val is not the full non-held-out pool")
    ft, te = plan.finetune, plan.test
    if np.intersect1d(ft, te).size:
        raise InternalError(f"{plan.fold_id}: fine-tune and test overlap")
    if set(es.subject_ids[np.concatenate([ft, te])].tolist()) != {plan.held_out}:
        raise InternalError(f"{plan.fold_id}: held-out batches contain other subjects")
    for kind, bs in (("fine-tune", plan.finetune_batches), ("test", plan.test_batches)):
        if len(bs) != N_BATCHES or any(len(b) != BATCH_SIZE for b in bs):
            raise InternalError(f"{plan.fold_id}: {kind} batches are not {N_BATCHES} x {BATCH_SIZE}")


@dataclass
class FoldData:
    """Scaled, cropped model inputs for one fold (scaler fitted on train only)."""
    x: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    scaler: Scaler
    fold_id: str


def fold_data(es: EpochSet, plan: FoldPlan, arch: M.ArchitectureConfig, scaler_kind: str) -> FoldData:
    tagged = replace(es, fold_id=plan.fold_id)
    scaler = fit_scaler(scaler_kind, tagged.subset(plan.train), fold_id=plan.fold_id)
    scaled = apply_scaler(scaler, tagged)
    x = crop_window(scaled, arch.window_s)
    if x.shape[-1] != arch.n_samples:
        raise ConfigurationError(f"cropped window has {x.shape[-1]} samples, model expects {arch.n_samples}")
    return FoldData(x, scaled.labels, scaled.subject_ids, scaler, plan.fold_id)


# --- training ------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: M.Model
    best_val_mcc: float
    epoch_of_best: int
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    rng_seed: list = field(default_factory=list)

    def header_extra(self) -> dict:
        return {
            "best_val_mcc": self.best_val_mcc,
            "epoch_of_best": self.epoch_of_best,
            "history": self.history,
            "config": self.config,
            "rng_seed": self.rng_seed,
        }


def _predict(model: M.Model, x, subject_ids, chunk=512) -> np.ndarray:
    out = []
    for s in range(0, len(x), chunk):
        sl = slice(s, s + chunk)
        z, _ = M.forward(model, x[sl], None if model.table is None else subject_ids[sl])
        out.append(z.astype(np.float64))
    return M.ad.sigmoid(np.concatenate(out)) if out else np.zeros(0)


def _mcc_at(probs, labels, threshold=0.5) -> float:
    return mcc(confusion(probs >= threshold, labels))


class EarlyStopping:
    """Track the best value; stop after ``patience`` epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.since = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch; True when it is the new best."""
        if value > self.best:
            self.best, self.best_epoch, self.since = value, epoch, 0
            return True
        self.since += 1
        return False

    @property
    def stop(self) -> bool:
        return self.since >= self.patience


def _step(model: M.Model, opt: Optimizer, grads, lr: float) -> None:
    """Optimizer update, then re-project every embedding row that moved."""
    before = None if model.table is None else model.table.rows.copy()
    opt.step(model.parameters(), grads, lr)
    if before is not None:
        # momentum can move rows whose gradient is zero this step
        moved = np.flatnonzero(np.any(model.table.rows != before, axis=1))
        if moved.size:
            normalize_table(model.table, moved)


def pretrain(model: M.Model, plan: FoldPlan, cfg: TrainConfig, data: FoldData) -> Checkpoint:
    """Early-stopped training on the plan's train split, selecting on validation MCC."""
    if data.scaler.fold_id != plan.fold_id:
        raise ConfigurationError("scaler was not fitted on this fold's training split")
    model = model.copy()
    seed = _stable_seed(cfg.seed, plan.held_out, "pretrain")
    rng = np.random.default_rng(seed)
    opt = Optimizer(cfg.optimizer)
    undersample = cfg.loss.kind == "weighted_bce_undersample"
    train_labels = data.labels[plan.train]
    if undersample:
        pos_weight = cfg.loss.pos_weight or float(cfg.loss.undersample_ratio)
    else:
        pos_weight = cfg.loss.pos_weight or float((train_labels == 0).sum() / max((train_labels == 1).sum(), 1))
    loss_fn = make_loss(cfg.loss, pos_weight)
    cond = model.table is not None
    xv, yv, sv = data.x[plan.val], data.labels[plan.val], data.subject_ids[plan.val]

    stopper = EarlyStopping(cfg.patience)
    best_state, history = model.copy(), []
    for ep in range(cfg.max_epochs):
        lr = cfg.lr_at(ep)
        idx = plan.train
        if undersample:
            idx = plan.train[undersample_indices(train_labels, cfg.loss.undersample_ratio,
                                                 int(rng.integers(2**31)))]
        idx = rng.permutation(idx)
        total, count = 0.0, 0
        for b, s in enumerate(range(0, len(idx), cfg.batch_size)):
            bi = idx[s:s + cfg.batch_size]
            if len(bi) < 2:
                continue  # batch norm needs two items
            z, state = M.forward(model, data.x[bi], data.subject_ids[bi] if cond else None,
                                 train=True, rng=rng)
            loss, dz = loss_fn(z, data.labels[bi])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {ep}, batch {b}")
            grads = M.backward(model, state, dz)
            _step(model, opt, grads, lr)
            total += loss * len(bi)
            count += len(bi)
        val_mcc = _mcc_at(_predict(model, xv, sv), yv)
        history.append({"epoch": ep, "lr": lr, "train_loss": total / max(count, 1), "val_mcc": val_mcc})
        if stopper.update(val_mcc, ep):
            best_state = model.copy()
        if stopper.stop:
            break
    return Checkpoint(best_state, float(stopper.best), stopper.best_epoch, history, cfg.to_dict(), seed)


def _held_out_model(ckpt: Checkpoint, subject: str, cfg: TrainConfig) -> M.Model:
    model = ckpt.model.copy()
    if model.table is not None and subject not in model.table.index:
        model.table = add_subject(model.table, subject, cfg.zero_shot_init,
                                  seed=_stable_seed(cfg.seed, subject)[0])
    return model


def _features(model: M.Model, x) -> np.ndarray:
    return np.concatenate([M.extract_features(model, x[s:s + 512]) for s in range(0, len(x), 512)])


def evaluate(model: M.Model, data: FoldData, idx, seed=None, n_epochs_trained=0) -> MetricsReport:
    idx = np.asarray(idx)
    probs = _predict(model, data.x[idx], data.subject_ids[idx])
    return report(probs, data.labels[idx], 0.5, n_epochs_trained, seed)


def trainable_set(model: M.Model) -> set[str]:
    """Fine-tune freeze rule: the conditioning rows if present, else the head."""
    names = set(model.parameters())
    if model.table is not None:
        return {"table.rows"}
    return {n for n in names if n.startswith("head.")}


def finetune_subset(model: M.Model, data: FoldData, train_idx, val_idx, cfg: TrainConfig,
                    seed, hf=None):
    """Fine-tune a copy with the freeze rule; the extractor runs in eval mode on cached features."""
    model = model.copy()
    trainable = trainable_set(model)
    frozen = set(model.parameters()) - trainable
    if hf is None:
        hf = _features(model, data.x)
    subj = data.subject_ids
    cond = model.table is not None
    rng = np.random.default_rng(seed)
    loss_fn = make_loss(cfg.loss, cfg.loss.pos_weight or float(_nt_ratio(data.labels[np.concatenate(train_idx)])))
    opt = Optimizer(cfg.optimizer)

    def val_mcc():
        z, _ = M.head_forward(model, hf[val_idx], subj[val_idx] if cond else None)
        return _mcc_at(M.ad.sigmoid(z.astype(np.float64)), data.labels[val_idx])

    # only trained epochs are checkpoint candidates, as in pre-training
    stopper, best_state, epochs = EarlyStopping(cfg.finetune_patience), None, 0
    for ep in range(1, cfg.finetune_max_epochs + 1):
        lr = cfg.finetune_lr / cfg.lr_decay_factor ** ((ep - 1) // cfg.lr_decay_every)
        order = rng.permutation(len(train_idx)) if cfg.subset_mode == "subsets" else range(len(train_idx))
        for j in order:
            bi = train_idx[j]
            z, state = M.head_forward(model, hf[bi], subj[bi] if cond else None)
            loss, dz = loss_fn(z, data.labels[bi])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite fine-tune loss at epoch {ep}")
            grads = M.backward(model, state, dz, frozen=frozen)
            _step(model, opt, grads, lr)
        epochs = ep
        if stopper.update(val_mcc(), ep):
            best_state = model.copy()
        if stopper.stop:
            break
    return best_state, {"best_val_mcc": float(stopper.best), "epoch_of_best": stopper.best_epoch,
                        "epochs_run": epochs}


def _nt_ratio(labels):
    return (labels == 0).sum() / max((labels == 1).sum(), 1)


def subsets(k: int, mode: str = "subsets"):
    if not 1 <= k <= FINETUNE_POOL:
        raise ConfigurationError(f"increment k must be in 1..{FINETUNE_POOL}, got {k}")
    pool = range(FINETUNE_POOL)
    it = itertools.combinations(pool, k) if mode == "subsets" else itertools.permutations(pool, k)
    return list(it)


def _aggregate(reports: list[MetricsReport]) -> dict:
    out = {}
    for key in ("mcc", "balanced_accuracy", "roc_auc"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = {"mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None}
    return out


def finetune_increment(ckpt: Checkpoint, plan: FoldPlan, k: int, cfg: TrainConfig, data: FoldData,
                       base: M.Model | None = None, hf=None) -> dict:
    """Fine-tune on every size-k selection of the first four batches and test on all ten."""
    base = base if base is not None else _held_out_model(ckpt, plan.held_out, cfg)
    if hf is None:
        hf = _features(base, data.x)
    val_idx = np.concatenate(plan.finetune_batches[FINETUNE_POOL:])
    test_idx = plan.test
    runs = []
    for combo in subsets(k, cfg.subset_mode):
        seed = _stable_seed(cfg.seed, plan.held_out, "ft", *combo)
        tuned, info = finetune_subset(base, data, [plan.finetune_batches[i] for i in combo],
                                      val_idx, cfg, seed, hf)
        z, _ = M.head_forward(tuned, hf[test_idx], data.subject_ids[test_idx] if tuned.table is not None else None)
        rep = report(M.ad.sigmoid(z.astype(np.float64)), data.labels[test_idx], 0.5,
                     info["epochs_run"], cfg.seed)
        rep.extra = {"batches": list(combo), **info}
        runs.append((rep, tuned))
    return {"k": k, "runs": [r.to_dict() for r, _ in runs], "aggregate": _aggregate([r for r, _ in runs]),
            "models": [m for _, m in runs]}


def param_diff(a: M.Model, b: M.Model) -> dict[str, np.ndarray]:
    """Per-parameter boolean masks of entries that differ."""
    pa, pb = a.parameters(), b.parameters()
    out = {}
    for k in pa:
        if pa[k].shape != pb[k].shape:
            # a table that gained a row: compare the shared part, new rows count as changed
            n = min(len(pa[k]), len(pb[k]))
            m = np.ones(pb[k].shape, dtype=bool)
            m[:n] = pa[k][:n] != pb[k][:n]
            out[k] = m
        else:
            out[k] = pa[k] != pb[k]
    return out


# --- whole folds and experiments -----------------------------------------------

STAGES = ("zero_shot", "ft_i1", "ft_i2", "ft_i3", "ft_i4")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    tmp.replace(path)


def load_checkpoint_dir(d: Path) -> Checkpoint:
    p = Path(d) / "pretrain" / "checkpoint.ckpt"
    model, extra = M.load_model(p)
    return Checkpoint(model, extra["best_val_mcc"], extra["epoch_of_best"], extra["history"],
                      extra["config"], extra["rng_seed"])


def run_fold(exp: ExperimentConfig, es: EpochSet, plan: FoldPlan, seed: int, out_dir=None,
             stage: str = "full") -> dict:
    """Pretrain, zero-shot and incrementally fine-tune one fold; optionally write artefacts.

    ``stage`` is "pretrain", "finetune" (reuses the checkpoint under ``out_dir``) or "full".
    """
    if stage not in ("pretrain", "finetune", "full"):
        raise ConfigurationError(f"unknown stage {stage!r}")
    cfg = replace(exp.train, seed=seed)
    check_plan(plan, es)
    data = fold_data(es, plan, exp.arch, cfg.scaler)
    d = None if out_dir is None else Path(out_dir)
    if stage == "finetune":
        if d is None:
            raise ConfigurationError("fine-tune stage needs the pretrain output directory")
        ckpt = load_checkpoint_dir(d)
    else:
        train_subjects = sorted(set(es.subject_ids[plan.train].tolist()))
        model = M.build(exp.arch, seed=seed, conditioning=cfg.conditioning, subjects=train_subjects)
        ckpt = pretrain(model, plan, cfg, data)
    result = {
        "fold": plan.held_out,
        "seed": seed,
        "pretrain": {"best_val_mcc": ckpt.best_val_mcc, "epoch_of_best": ckpt.epoch_of_best,
                     "history": ckpt.history},
    }
    if stage != "pretrain":
        base = _held_out_model(ckpt, plan.held_out, cfg)
        hf = _features(base, data.x)
        result["zero_shot"] = evaluate(base, data, plan.test, seed=seed).to_dict()
        for k in exp.increments:
            inc = finetune_increment(ckpt, plan, k, cfg, data, base=base, hf=hf)
            inc.pop("models")
            result[f"ft_i{k}"] = inc
    if d is not None:
        if stage != "finetune":
            M.save_model(d / "pretrain" / "checkpoint.ckpt", ckpt.model, ckpt.header_extra())
            _write_json(d / "pretrain" / "metrics.json", result["pretrain"])
            _write_json(d / "pretrain" / "scaler.json", data.scaler.to_dict())
        for st in STAGES:
            if st in result:
                _write_json(d / st / "metrics.json", result[st])
        _write_json(d / f"done_{stage}.json", {"fold": plan.held_out, "seed": seed, "stage": stage})
    return result


def stage_metric(result: dict, stage: str, key: str = "mcc"):
    r = result[stage]
    if stage == "pretrain":
        return r["best_val_mcc"] if key == "mcc" else None
    return r[key] if stage == "zero_shot" else r["aggregate"][key]["mean"]


def stage_mcc(result: dict, stage: str) -> float:
    return stage_metric(result, stage, "mcc")


def _spread(results, stage, key, seeds):
    vals = [stage_metric(r, stage, key) for r in results]
    if any(v is None for v in vals):
        return None
    per_seed = [[stage_metric(r, stage, key) for r in results if r["seed"] == s] for s in seeds]
    return {
        "mean": float(np.mean(vals)),
        # spread across folds, averaged over seeds
        "std": float(np.mean([np.std(v) for v in per_seed])),
        "seed_std": float(np.std([np.mean(v) for v in per_seed])),
    }


def summarize(exp: ExperimentConfig, results: list[dict]) -> dict:
    """Table-style row: per stage mean/std across folds plus the spread across seeds."""
    seeds = sorted({r["seed"] for r in results})
    row = {"model": exp.arch.arch, "conditioning": exp.train.conditioning,
           "n_folds": len({r["fold"] for r in results}), "seeds": seeds, "stages": {}}
    for stage in ("pretrain", *STAGES):
        if stage not in results[0]:
            continue
        entry = {"mcc": _spread(results, stage, "mcc", seeds)}
        if stage != "pretrain":
            entry["roc_auc"] = _spread(results, stage, "roc_auc", seeds)
            entry["balanced_accuracy"] = _spread(results, stage, "balanced_accuracy", seeds)
        row["stages"][stage] = entry
    return {"experiment": exp.name, "rows": [row]}


def _fold_job(args):
    exp, es, plan, seed, out, stage = args
    return run_fold(exp, es, plan, seed, out, stage)


def _load_done(d: Path, stage: str) -> dict | None:
    """Results of a completed fold stage, or None if it must be (re)computed."""
    marker = d / f"done_{stage}.json"
    ckpt = d / "pretrain" / "checkpoint.ckpt"
    if not marker.exists() or not ckpt.exists():
        return None
    if marker.stat().st_mtime < ckpt.stat().st_mtime:
        return None  # checkpoint rewritten after the marker: stale
    res = json.loads(marker.read_text())
    res.pop("stage", None)
    res["pretrain"] = json.loads((d / "pretrain" / "metrics.json").read_text())
    for st in STAGES:
        p = d / st / "metrics.json"
        if p.exists() and stage != "pretrain":
            res[st] = json.loads(p.read_text())
    return res


def run_experiment(exp: ExperimentConfig, es: EpochSet, seeds=(0,), out_dir=None,
                   jobs: int = 1, resume: bool = False, plan_seed: int = 0,
                   stage: str = "full") -> tuple[dict, list]:
    plans = make_fold_plans(es, plan_seed)
    root = None if out_dir is None else Path(out_dir) / exp.name
    tasks, results = [], {}
    for seed in seeds:
        for plan in plans:
            fd = None if root is None else root / f"{plan.held_out}__seed{seed}"
            if resume and fd is not None:
                done = _load_done(fd, stage)
                if done is not None:
                    results[(seed, plan.held_out)] = done
                    continue
            tasks.append((exp, es, plan, seed, fd, stage))
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            for t, r in zip(tasks, pool.map(_fold_job, tasks)):
                results[(t[3], t[2].held_out)] = r
    else:
        for t in tasks:
            results[(t[3], t[2].held_out)] = _fold_job(t)
    ordered = [results[(s, p.held_out)] for s in seeds for p in plans]
    summary = summarize(exp, ordered)
    if root is not None:
        _write_json(root / "summary.json", summary)
    return summary, ordered


def repeat_seeds(experiment, seeds) -> dict:
    """Run ``experiment(seed) -> {metric: value}`` per seed; mean and std per metric."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigurationError("repeat_seeds needs at least two seeds")
    runs = [experiment(s) for s in seeds]
    keys = runs[0].keys()
    # exact rational arithmetic: identical runs give std exactly 0
    return {k: {"mean": float(statistics.mean(r[k] for r in runs)),
                "std": float(statistics.pstdev([r[k] for r in runs]))} for k in keys}


def median_subject(per_trial_mcc: dict) -> str:
    """Subject whose mean trial MCC is closest to the global mean over all trials."""
    if not per_trial_mcc:
        raise ConfigurationError("median_subject needs at least one subject")
    if any(len(v) == 0 for v in per_trial_mcc.values()):
        raise ConfigurationError("every subject needs at least one trial")
    pooled = np.concatenate([np.asarray(v, dtype=np.float64) for v in per_trial_mcc.values()])
    g = pooled.mean()
    return min(sorted(per_trial_mcc), key=lambda s: abs(np.mean(per_trial_mcc[s]) - g))
