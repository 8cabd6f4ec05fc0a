"""Training, cross-validation, metrics, and the strain-ablation experiment.

Subjects are split into five rotated train/validation/test partitions
(80/10/10, severity-stratified, disjoint test slices).  Per fold, one model
is trained with the strain feature live and one with the channel zeroed
after standardization (identical parameter count, identical split and
seeds); pooled point-level F1 per arm feeds a paired two-sided t-test whose
p-value is evaluated in-repo via the regularized incomplete beta function.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import OnhPointCloud, resample
from .pointnet import (
    AdamState,
    Architecture,
    ModelParams,
    adam_step,
    bce_loss,
    forward_backward_batch,
    forward_batch,
    init_params,
    predict,
)
from .visualfield import N_VF_POINTS

DEFAULT_N_POINTS = 3000
DEFAULT_N_FOLDS = 5
DEFAULT_THRESHOLD = 0.5
DEFAULT_MAX_CROP_DEG = 45.0
CROP_MIN_POINTS = 100
CROP_MAX_RETRIES = 5

N_FEATURES = 5          # x, y, z, thickness, effective strain
STRAIN_FEATURE = 4

# Clinical-cohort reference, quoted for context in ablation reports; synthetic
# cohorts are not expected to reproduce these numbers.
CLINICAL_REFERENCE_F1 = {"with_strain": "0.76 +/- 0.02",
                         "structure_only": "0.71 +/- 0.02"}


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 36
    lr: float = 2e-3
    batch_size: int = 8
    n_points: int = DEFAULT_N_POINTS
    max_crop_deg: float = DEFAULT_MAX_CROP_DEG
    threshold: float = DEFAULT_THRESHOLD
    n_folds: int = DEFAULT_N_FOLDS
    use_strain: bool = True
    dtype: str = "float32"
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def config_digest(obj) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SubjectSample:
    """One training unit: id, processed cloud, 52 defect labels."""

    subject_id: str
    cloud: OnhPointCloud
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int8)
        if self.labels.shape != (N_VF_POINTS,):
            raise ValueError(f"labels must have length {N_VF_POINTS}")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(cloud: OnhPointCloud, rng: np.random.Generator,
            cfg: TrainConfig) -> OnhPointCloud:
    """Random sector crop, z-rotation, and resampling to a fixed point count.

    The crop removes an angular sector of width uniform in
    [0, max_crop_deg]; if fewer than CROP_MIN_POINTS points would remain the
    draw is retried with the width cap halved, and after CROP_MAX_RETRIES
    failures the crop is skipped.  Rotation about z preserves every point's
    radial distance, depth, and attributes.
    """
    pts = cloud.points
    theta = np.arctan2(pts[:, 1], pts[:, 0])

    keep = None
    cap = cfg.max_crop_deg
    for _ in range(CROP_MAX_RETRIES + 1):
        width = np.radians(rng.uniform(0.0, cap))
        start = rng.uniform(0.0, 2.0 * np.pi)
        in_sector = np.mod(theta - start, 2.0 * np.pi) < width
        if (~in_sector).sum() >= min(CROP_MIN_POINTS, len(pts)):
            keep = ~in_sector
            break
        cap /= 2.0
    out = cloud if keep is None else cloud.take(np.nonzero(keep)[0])

    angle = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    rotated = OnhPointCloud(
        points=out.points @ rot.T,
        tissue=out.tissue.copy(),
        thickness=out.thickness.copy(),
        strain=None if out.strain is None else out.strain.copy(),
        frame=out.frame,
    )
    return resample(rotated, cfg.n_points, rng)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    train: tuple
    val: tuple
    test: tuple


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple   # of FoldSplit

    def to_dict(self):
        return {"folds": [{"train": list(f.train), "val": list(f.val),
                           "test": list(f.test)} for f in self.folds]}


def make_splits(subject_ids, seed, defect_counts=None) -> SplitPlan:
    """Five rotated 80/10/10 splits with pairwise-disjoint test slices.

    Subjects are ranked into severity terciles by defect count (single
    stratum when counts are absent), shuffled within tercile, and dealt
    round-robin into ten slices; fold k tests slice k and validates slice
    k+5, training on the remaining eight.  Slice sizes differ by at most
    one, so every fold is within one subject of the exact ratios.
    """
    ids = list(subject_ids)
    if len(ids) < 10:
        raise ValueError("need at least 10 subjects to split")
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    if defect_counts is None:
        strata = [np.arange(len(ids))]
    else:
        counts = np.asarray(list(defect_counts))
        if len(counts) != len(ids):
            raise ValueError("defect_counts must align with subject_ids")
        order = np.argsort(counts, kind="stable")
        strata = np.array_split(order, 3)

    dealt = []
    for stratum in strata:
        dealt.extend(rng.permutation(stratum).tolist())

    slices = [[] for _ in range(2 * DEFAULT_N_FOLDS)]
    for pos, subj in enumerate(dealt):
        slices[pos % len(slices)].append(ids[subj])

    folds = []
    for k in range(DEFAULT_N_FOLDS):
        test = tuple(slices[k])
        val = tuple(slices[k + DEFAULT_N_FOLDS])
        train = tuple(i for j, sl in enumerate(slices)
                      if j not in (k, k + DEFAULT_N_FOLDS) for i in sl)
        folds.append(FoldSplit(train=train, val=val, test=test))
    return SplitPlan(folds=tuple(folds))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def features(cloud: OnhPointCloud) -> np.ndarray:
    """Per-point feature rows (x, y, z, thickness, effective strain)."""
    strain = np.zeros(len(cloud)) if cloud.strain is None else cloud.strain
    return np.column_stack([cloud.points, cloud.thickness, strain])


def compute_feature_stats(clouds):
    """Pooled per-feature mean and standard deviation over training clouds."""
    stacked = np.concatenate([features(c) for c in clouds])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def standardize(feats, stats, use_strain=True):
    """Center/scale features; the strain channel is zeroed when disabled."""
    mean, std = stats
    out = (feats - mean) / std
    if not use_strain:
        out[:, STRAIN_FEATURE] = 0.0
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    f1_subject_mean: float

    def to_dict(self):
        return asdict(self)


def micro_metrics(pred, labels):
    """(precision, recall, f1, tp, fp, fn, tn) pooled over all decisions."""
    pred = np.asarray(pred).reshape(-1).astype(bool)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if pred.shape != labels.shape:
        raise ValueError("prediction/label shapes differ")
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1, tp, fp, fn, tn


def evaluate(params: ModelParams, test_set, threshold=DEFAULT_THRESHOLD) -> Metrics:
    """Micro precision/recall/F1 over all pooled point decisions of a test set.

    test_set holds (standardized features, labels) pairs.  The per-subject
    mean F1 is reported alongside the pooled scores.
    """
    test_set = list(test_set)
    if not test_set:
        raise ValueError("test set is empty")
    preds, labels, per_subject = [], [], []
    for feats, y in test_set:
        p = predict(forward_batch(params, np.asarray(feats)[None])[0], threshold)
        preds.append(p)
        labels.append(np.asarray(y))
        per_subject.append(micro_metrics(p, y)[2])
    precision, recall, f1, tp, fp, fn, tn = micro_metrics(
        np.concatenate(preds), np.concatenate(labels))
    return Metrics(precision=precision, recall=recall, f1=f1,
                   tp=tp, fp=fp, fn=fn, tn=tn,
                   f1_subject_mean=float(np.mean(per_subject)))


# ---------------------------------------------------------------------------
# Student-t tail probability (in-repo evaluation)
# ---------------------------------------------------------------------------

def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return float(x)
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df) -> float:
    """P(|T_df| >= |t|) via the incomplete beta identity."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return betainc_reg(df / 2.0, 0.5, x)


def paired_t_test(a, b):
    """Two-sided paired t-test on matched score lists; returns (t, p).

    Zero variance of the differences degenerates to t = +/-inf, p = 0 for a
    nonzero mean difference and t = 0, p = 1 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length score lists of length >= 2")
    d = a - b
    sd = d.std(ddof=1)
    mean = d.mean()
    n = len(d)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), student_t_two_sided_p(t, n - 1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class FoldReport:
    fold_index: int
    seed: int
    use_strain: bool
    config_key: str
    history: tuple            # (train_loss, val_loss) per epoch
    best_epoch: int
    metrics: Metrics
    n_train: int
    n_val: int
    n_test: int

    def to_dict(self):
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        d["history"] = [list(h) for h in self.history]
        return d


def _prepare_eval_set(samples, cfg, stats, rng):
    """Fixed standardized feature matrices for validation/test subjects."""
    out = []
    for s in samples:
        fixed = resample(s.cloud, cfg.n_points, rng)
        out.append((standardize(features(fixed), stats, cfg.use_strain), s.labels))
    return out


def train_model(dataset, fold: FoldSplit, cfg: TrainConfig,
                arch: Architecture | None = None):
    """Adam training with augmentation; returns the best-validation snapshot.

    The parameter snapshot with minimum validation BCE across epochs is
    returned together with a per-fold report carrying the loss history and
    test metrics.  Deterministic per cfg.seed.
    """
    arch = arch or Architecture()
    by_id = {s.subject_id: s for s in dataset}
    train = [by_id[i] for i in fold.train]
    val = [by_id[i] for i in fold.val]
    test = [by_id[i] for i in fold.test]
    if not train or not val or not test:
        raise ValueError("fold has an empty partition")

    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init, rng_aug, rng_order, rng_eval = (np.random.default_rng(s) for s in streams)

    dtype = {"float32": np.float32, "float64": np.float64}[cfg.dtype]
    params = init_params(arch, rng_init).astype(dtype)
    state = AdamState.zeros(params)
    stats = compute_feature_stats([s.cloud for s in train])
    val_set = _prepare_eval_set(val, cfg, stats, rng_eval)
    test_set = _prepare_eval_set(test, cfg, stats, rng_eval)
    X_val = np.stack([f for f, _ in val_set])
    Y_val = np.stack([y for _, y in val_set])

    best_loss, best_params, best_epoch = math.inf, params.copy(), -1
    history = []
    for epoch in range(cfg.epochs):
        order = rng_order.permutation(len(train))
        seen, acc = 0, 0.0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            X = np.stack([
                standardize(features(augment(train[i].cloud, rng_aug, cfg)),
                            stats, cfg.use_strain)
                for i in chunk])
            Y = np.stack([train[i].labels for i in chunk])
            loss, _, grads = forward_backward_batch(params, X, Y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            params, state = adam_step(params, grads, state, cfg.lr)
            acc += loss * len(chunk)
            seen += len(chunk)

        val_probs = forward_batch(params, X_val)
        val_loss = float(np.mean([bce_loss(val_probs[i], Y_val[i])
                                  for i in range(len(val))]))
        history.append((acc / seen, val_loss))
        if val_loss < best_loss:
            best_loss, best_params, best_epoch = val_loss, params.copy(), epoch

    metrics = evaluate(best_params, test_set, cfg.threshold)
    report = FoldReport(
        fold_index=-1, seed=cfg.seed, use_strain=cfg.use_strain,
        config_key=config_digest(cfg.to_dict()),
        history=tuple(history), best_epoch=best_epoch, metrics=metrics,
        n_train=len(train), n_val=len(val), n_test=len(test),
    )
    return best_params, report


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    seed: int
    arms: tuple                    # (strain flag arm A, strain flag arm B)
    fold_f1_a: tuple
    fold_f1_b: tuple
    mean_a: float
    sd_a: float
    mean_b: float
    sd_b: float
    t_statistic: float
    p_value: float
    split_key: str                 # digest of the shared split plan
    config_key: str                # digest of the config minus the strain flag
    fold_reports_a: tuple = ()
    fold_reports_b: tuple = ()
    clinical_reference: dict = field(default_factory=lambda: dict(CLINICAL_REFERENCE_F1))

    @property
    def planted_effect_confirmed(self):
        return self.mean_a > self.mean_b and self.p_value < 0.05

    def to_dict(self):
        return {
            "seed": self.seed,
            "arms": list(self.arms),
            "fold_f1_a": list(self.fold_f1_a),
            "fold_f1_b": list(self.fold_f1_b),
            "mean_a": self.mean_a, "sd_a": self.sd_a,
            "mean_b": self.mean_b, "sd_b": self.sd_b,
            "t_statistic": self.t_statistic, "p_value": self.p_value,
            "split_key": self.split_key, "config_key": self.config_key,
            "planted_effect_confirmed": bool(self.planted_effect_confirmed),
            "clinical_reference": dict(self.clinical_reference),
            "fold_reports_a": [r.to_dict() for r in self.fold_reports_a],
            "fold_reports_b": [r.to_dict() for r in self.fold_reports_b],
        }


def run_ablation(dataset, seed, cfg: TrainConfig | None = None,
                 arms=(True, False)) -> AblationReport:
    """Train both arms fold by fold on identical splits and seeds.

    Arm A and arm B differ only in the strain-channel flag; everything else
    (split plan, initialization, augmentation draws) is shared, so the
    comparison isolates the contribution of the strain feature.
    """
    cfg = cfg or TrainConfig(seed=seed)
    dataset = list(dataset)
    ids = [s.subject_id for s in dataset]
    counts = [int(np.sum(s.labels)) for s in dataset]
    plan = make_splits(ids, seed, defect_counts=counts)

    base_cfg = cfg.to_dict()
    base_cfg.pop("use_strain")
    fold_seeds = [int(s.generate_state(1)[0])
                  for s in np.random.SeedSequence(seed).spawn(len(plan.folds))]

    f1_a, f1_b, reports_a, reports_b = [], [], [], []
    for k, fold in enumerate(plan.folds):
        for use_strain, f1s, reports in ((arms[0], f1_a, reports_a),
                                         (arms[1], f1_b, reports_b)):
            fold_cfg = TrainConfig(**{**cfg.to_dict(),
                                      "use_strain": use_strain,
                                      "seed": fold_seeds[k]})
            _, report = train_model(dataset, fold, fold_cfg)
            report.fold_index = k
            f1s.append(report.metrics.f1)
            reports.append(report)

    t, p = paired_t_test(f1_a, f1_b)
    return AblationReport(
        seed=seed, arms=tuple(arms),
        fold_f1_a=tuple(f1_a), fold_f1_b=tuple(f1_b),
        mean_a=float(np.mean(f1_a)), sd_a=float(np.std(f1_a, ddof=1)),
        mean_b=float(np.mean(f1_b)), sd_b=float(np.std(f1_b, ddof=1)),
        t_statistic=t, p_value=p,
        split_key=config_digest(plan.to_dict()),
        config_key=config_digest(base_cfg),
        fold_reports_a=tuple(reports_a), fold_reports_b=tuple(reports_b),
    )
