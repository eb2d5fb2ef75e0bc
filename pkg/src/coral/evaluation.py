"""Sample-quality metrics and latent-separation diagnostics over generic feature sets."""

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import silhouette_score
from sklearn.neural_network import MLPClassifier

from coral import rng as rngs
from coral.denoiser import NULL_LABEL, DenoiserModel, forward_batch
from coral.forward_process import q_sample
from coral.longtail_data import LabeledDataset
from coral.schedules import NoiseSchedule


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return self.features.shape[0]

    def write_csv(self, path) -> None:
        cols = self.features
        if self.labels is not None:
            cols = np.column_stack([cols, self.labels])
        header = ",".join([f"f{i}" for i in range(self.features.shape[1])] + (["label"] if self.labels is not None else []))
        fmt = ["%.17g"] * self.features.shape[1] + (["%d"] if self.labels is not None else [])
        np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt=fmt)


@dataclass
class EvalReport:
    frechet: float
    per_class_frechet: list
    classifier_score: float
    f8: float
    f_inv8: float
    improved_precision: float
    improved_recall: float
    latent_knn_purity: list | None
    silhouette: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def fit_gaussian(fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    x = fs.features
    if x.shape[0] < 2:
        raise ValueError("need at least two points to fit a covariance")
    mu = x.mean(axis=0)
    centered = x - mu
    return mu, centered.T @ centered / (x.shape[0] - 1)


def _psd_sqrt(S: np.ndarray, clamp: float) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    if w.min() < -clamp * max(1.0, abs(w).max()):
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance(m1, S1, m2, S2, sym_tol: float = 1e-8, clamp: float = 1e-10) -> float:
    """||m1 - m2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2) via symmetric eigendecompositions."""
    m1, m2 = np.atleast_1d(m1).astype(np.float64), np.atleast_1d(m2).astype(np.float64)
    S1, S2 = np.atleast_2d(S1).astype(np.float64), np.atleast_2d(S2).astype(np.float64)
    for S in (S1, S2):
        if np.abs(S - S.T).max() > sym_tol * max(1.0, np.abs(S).max()):
            raise ValueError("covariance matrix is not symmetric")
    S1 = 0.5 * (S1 + S1.T)
    S2 = 0.5 * (S2 + S2.T)
    if np.array_equal(m1, m2) and np.array_equal(S1, S2):
        return 0.0
    r1 = _psd_sqrt(S1, clamp)
    inner = r1 @ S2 @ r1
    cross = _psd_sqrt(0.5 * (inner + inner.T), clamp)
    diff = m1 - m2
    d = float(diff @ diff + np.trace(S1) + np.trace(S2) - 2.0 * np.trace(cross))
    return max(d, 0.0)


def prd_from_histograms(P, Q, num_angles: int = 1001, atol: float = 1e-6) -> tuple[float, float]:
    """F_8 and F_1/8 of the PRD curve between reference histogram P and model histogram Q."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("histograms must have the same number of bins")
    if abs(P.sum() - 1.0) > atol or abs(Q.sum() - 1.0) > atol:
        raise ValueError("histograms must sum to 1")
    j = np.arange(1, num_angles + 1)
    slopes = np.tan(j / (num_angles + 1) * (np.pi / 2))
    precision = np.minimum(slopes[:, None] * P[None, :], Q[None, :]).sum(axis=1)
    recall = precision / slopes
    return _f_beta(precision, recall, 8.0), _f_beta(precision, recall, 1.0 / 8.0)


def _f_beta(precision, recall, beta):
    num = (1.0 + beta**2) * precision * recall
    den = beta**2 * precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(min(f.max(), 1.0))


def _sq_dists(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, rtol: float = 1e-6):
    """Lloyd iterations from k-means++ seeding. Returns (centers, assignments)."""
    n = x.shape[0]
    if k > n:
        raise ValueError(f"num_clusters={k} exceeds the number of points ({n})")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        pick = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers[i] = x[pick]
        d2 = np.minimum(d2, _sq_dists(x, centers[i : i + 1])[:, 0])
    prev = np.inf
    for _ in range(max_iter):
        dist = _sq_dists(x, centers)
        assign = dist.argmin(axis=1)
        inertia = dist[np.arange(n), assign].sum()
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
        if np.isfinite(prev) and prev - inertia <= rtol * prev:
            break
        prev = inertia
    assign = _sq_dists(x, centers).argmin(axis=1)
    return centers, assign


def prd_f_scores(real: FeatureSet, gen: FeatureSet, num_clusters: int, seed: int = 0,
                 num_angles: int = 1001) -> tuple[float, float]:
    if len(real) == 0 or len(gen) == 0:
        raise ValueError("both feature sets must be non-empty")
    data = np.concatenate([real.features, gen.features])
    if num_clusters > data.shape[0]:
        raise ValueError(f"num_clusters={num_clusters} exceeds combined set size {data.shape[0]}")
    _, assign = kmeans(data, num_clusters, rngs.stream(seed, "prd-kmeans"))
    n_real = len(real)
    P = np.bincount(assign[:n_real], minlength=num_clusters) / n_real
    Q = np.bincount(assign[n_real:], minlength=num_clusters) / len(gen)
    return prd_from_histograms(P, Q, num_angles)


def _kth_neighbor_radius(x: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    out = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        d = _sq_dists(x[s : s + chunk], x)
        # column k of the sorted row skips the zero self-distance
        out[s : s + chunk] = np.sqrt(np.partition(d, k, axis=1)[:, k])
    return out


def _coverage(query: np.ndarray, ref: np.ndarray, radii: np.ndarray, chunk: int = 1024) -> float:
    hits = 0
    r2 = radii**2
    for s in range(0, query.shape[0], chunk):
        d = _sq_dists(query[s : s + chunk], ref)
        hits += int(np.any(d <= r2[None, :], axis=1).sum())
    return hits / query.shape[0]


def improved_precision_recall(real: FeatureSet, gen: FeatureSet, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision (gen inside real balls) and recall (real inside gen balls)."""
    if len(real) <= k or len(gen) <= k:
        raise ValueError(f"each set needs more than k={k} points")
    r_real = _kth_neighbor_radius(real.features, k)
    r_gen = _kth_neighbor_radius(gen.features, k)
    return _coverage(gen.features, real.features, r_real), _coverage(real.features, gen.features, r_gen)


def classifier_score(posteriors, atol: float = 1e-6) -> float:
    """exp(E_x KL(p(y|x) || p(y))): 1 for uninformative posteriors, C for confident uniform coverage."""
    p = np.asarray(posteriors, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > atol):
        raise ValueError("each row must be a probability vector")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(math.exp(terms.sum(axis=1).mean()))


def extract_latents(model: DenoiserModel, data: LabeledDataset, t: int, schedule: NoiseSchedule,
                    rng: np.random.Generator, condition: str = "label") -> FeatureSet:
    """Bottleneck features of each sample noised to level ``t`` (t = 0 uses the clean sample).

    ``condition="label"`` feeds each sample's own class; ``"null"`` feeds the null label
    so the features reflect the input alone.
    """
    if condition not in ("label", "null"):
        raise ValueError(f"unknown condition {condition!r}")
    if not (0 <= t <= schedule.T):
        raise ValueError(f"timestep outside 0..{schedule.T}")
    x0 = data.samples.astype(np.float64)
    eps = rng.standard_normal(x0.shape)
    ts = np.full(data.n_total, t)
    x_t = q_sample(x0, ts, eps, schedule) if t > 0 else x0
    y = np.full(data.n_total, NULL_LABEL) if condition == "null" else data.labels
    if data.n_total == 0:
        return FeatureSet(np.zeros((0, model.arch.bottleneck)), data.labels.copy())
    h = forward_batch(model, x_t, ts, y).h_bottleneck
    return FeatureSet(h, data.labels.copy())


def latent_separation(fs: FeatureSet, k: int = 10, num_classes: int | None = None, chunk: int = 1024):
    """Per-class k-NN label purity (self excluded) and the mean silhouette coefficient.

    The silhouette is ``None`` when fewer than two classes are present. Classes with no
    points get a ``None`` purity entry.
    """
    x, labels = fs.features, fs.labels
    n = x.shape[0]
    if labels is None:
        raise ValueError("latent_separation needs labels")
    if n <= k:
        raise ValueError(f"need more than k={k} points")
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    same = np.empty(n)
    for s in range(0, n, chunk):
        d = _sq_dists(x[s : s + chunk], x)
        rows = np.arange(d.shape[0])
        d[rows, s + rows] = np.inf
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        same[s : s + chunk] = (labels[nn] == labels[s : s + chunk, None]).mean(axis=1)
    purity = [float(same[labels == c].mean()) if np.any(labels == c) else None for c in range(C)]
    present = np.unique(labels)
    sil = float(silhouette_score(x, labels)) if 2 <= present.size < n else None
    return purity, sil


def per_class_frechet(real: LabeledDataset, gen: LabeledDataset, feature_map=None) -> list:
    """Frechet distance per class between class-restricted Gaussians; ``None`` if a side has < 2 points."""
    fmap = feature_map or (lambda x: np.asarray(x, dtype=np.float64))
    out = []
    for c in range(real.num_classes):
        a = real.samples[real.labels == c]
        b = gen.samples[gen.labels == c]
        if a.shape[0] < 2 or b.shape[0] < 2:
            out.append(None)
            continue
        m1, S1 = fit_gaussian(FeatureSet(fmap(a)))
        m2, S2 = fit_gaussian(FeatureSet(fmap(b)))
        out.append(frechet_distance(m1, S1, m2, S2))
    return out


def per_class_precision_recall(real: LabeledDataset, gen: LabeledDataset, k: int = 3, feature_map=None) -> list:
    """Improved (precision, recall) restricted to each class; ``None`` where a side has <= k points."""
    fmap = feature_map or (lambda x: np.asarray(x, dtype=np.float64))
    out = []
    for c in range(real.num_classes):
        a = real.samples[real.labels == c]
        b = gen.samples[gen.labels == c]
        if a.shape[0] <= k or b.shape[0] <= k:
            out.append(None)
            continue
        out.append(improved_precision_recall(FeatureSet(fmap(a)), FeatureSet(fmap(b)), k))
    return out


@dataclass
class Probe:
    """Small classifier trained on class-balanced real data; supplies posteriors and penultimate features."""

    clf: MLPClassifier

    def posteriors(self, x) -> np.ndarray:
        return self.clf.predict_proba(np.asarray(x, dtype=np.float64))

    def features(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for W, b in zip(self.clf.coefs_[:-1], self.clf.intercepts_[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        return h


def train_probe(data: LabeledDataset, seed: int = 0, hidden: int = 64, max_iter: int = 300) -> Probe:
    rng = rngs.stream(seed, "probe")
    present = np.flatnonzero(data.class_counts)
    per_class = int(data.class_counts[present].min())
    idx = np.concatenate([rng.choice(np.flatnonzero(data.labels == c), per_class, replace=False) for c in present])
    clf = MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=max_iter, random_state=seed % (2**32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(data.samples[idx].astype(np.float64), data.labels[idx])
    if list(clf.classes_) != list(range(data.num_classes)):
        raise ValueError("probe classifier needs every class present in the real data")
    return Probe(clf)


def evaluate(real: LabeledDataset, gen: LabeledDataset, model: DenoiserModel | None = None,
             schedule: NoiseSchedule | None = None, knn_k: int = 3, num_clusters: int | None = None,
             latent_k: int = 10, latent_t: int | None = None, seed: int = 0,
             raw_feature_max_dim: int = 16, latent_condition: str = "label") -> tuple[EvalReport, FeatureSet | None]:
    """Full metric stack. Returns the report and the latent feature set (if a model is given)."""
    if real.dim != gen.dim:
        raise ValueError(f"dimension mismatch: real {real.dim} vs generated {gen.dim}")
    C = real.num_classes
    probe = train_probe(real, seed)
    if real.dim <= raw_feature_max_dim:
        fmap = lambda x: np.asarray(x, dtype=np.float64)  # noqa: E731
    else:
        fmap = probe.features
    fr, fg = FeatureSet(fmap(real.samples)), FeatureSet(fmap(gen.samples))
    m1, S1 = fit_gaussian(fr)
    m2, S2 = fit_gaussian(fg)
    clusters = num_clusters if num_clusters is not None else 20 * C
    f8, f_inv8 = prd_f_scores(fr, fg, clusters, seed)
    prec, rec = improved_precision_recall(fr, fg, knn_k)
    latents = purity = sil = None
    if model is not None:
        if schedule is None:
            raise ValueError("latent diagnostics need the noise schedule")
        t = latent_t if latent_t is not None else int(math.floor(0.05 * schedule.T))
        latents = extract_latents(model, real, t, schedule, rngs.stream(seed, "latents"), latent_condition)
        purity, sil = latent_separation(latents, latent_k, C)
    report = EvalReport(
        frechet=frechet_distance(m1, S1, m2, S2),
        per_class_frechet=per_class_frechet(real, gen, fmap),
        classifier_score=classifier_score(probe.posteriors(gen.samples)),
        f8=f8,
        f_inv8=f_inv8,
        improved_precision=prec,
        improved_recall=rec,
        latent_knn_purity=purity,
        silhouette=sil,
    )
    return report, latents
