"""Class-conditional Gaussian mixture standing in for the source embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .network import NumericalError, SegNetwork, forward


class StarvedClassError(NumericalError):
    def __init__(self, classes, counts=None, hint=""):
        self.classes = list(classes)
        self.counts = counts
        msg = f"classes without enough samples: {self.classes}"
        if counts is not None:
            msg += f" (counts {counts})"
        if hint:
            msg += f"; {hint}"
        super().__init__(msg)


@dataclass(frozen=True)
class InternalDistribution:
    """Gaussian mixture with ``components_per_class`` components per class.

    Component ``c`` belongs to class ``c // components_per_class``. ``weights`` are
    normalized within each class; ``class_priors`` holds the fitted class frequencies
    and is only a default when the caller supplies no proportions.
    """

    num_classes: int
    components_per_class: int
    weights: np.ndarray  # (K*w,)
    means: np.ndarray  # (K*w, F)
    covariances: np.ndarray  # (K*w, F, F)
    rho: float = 0.0
    reg: float = 1e-4
    class_priors: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def num_components(self):
        return self.num_classes * self.components_per_class

    def component_class(self, c):
        return c // self.components_per_class

    def class_slice(self, k):
        w = self.components_per_class
        return slice(k * w, (k + 1) * w)

    def cholesky(self):
        return np.linalg.cholesky(self.covariances)

    def global_weights(self, class_proportions=None):
        props = self._proportions(class_proportions)
        return self.weights * np.repeat(props, self.components_per_class)

    def _proportions(self, class_proportions):
        if class_proportions is None:
            if self.class_priors is not None:
                return np.asarray(self.class_priors, dtype=np.float64)
            return np.full(self.num_classes, 1.0 / self.num_classes)
        props = np.asarray(class_proportions, dtype=np.float64)
        if props.shape != (self.num_classes,) or np.any(props < 0):
            raise ValueError("class proportions must be K nonnegative reals")
        if abs(props.sum() - 1.0) > 1e-6:
            raise ValueError(f"class proportions sum to {props.sum()}, not 1")
        return props


@dataclass
class SelectedPixelSet:
    latents: list  # per class, (n_k, F)
    rho: float

    @property
    def counts(self):
        return [len(x) for x in self.latents]

    @property
    def total(self):
        return int(sum(self.counts))


@dataclass
class PseudoDataset:
    z: np.ndarray
    y: np.ndarray
    components: np.ndarray


def select_confident(net: SegNetwork, images, masks, rho=0.97, batch_size=32, require_all=True):
    """Collect source latents whose max class probability is strictly above ``rho``.

    Pixels are grouped by their true label.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must satisfy 0 <= rho < 1")
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    k = net.num_classes
    buckets = [[] for _ in range(k)]
    for i in range(0, len(images), batch_size):
        latent, probs = forward(net, images[i:i + batch_size])
        keep = probs.max(axis=-1) > rho
        labels = masks[i:i + batch_size]
        for c in range(k):
            sel = keep & (labels == c)
            buckets[c].append(latent[sel])
    latents = [np.concatenate(b, axis=0) if b else np.zeros((0, net.latent_dim)) for b in buckets]
    selected = SelectedPixelSet(latents, rho)
    starved = [c for c, n in enumerate(selected.counts) if n == 0]
    if require_all and starved:
        raise StarvedClassError(starved, selected.counts, hint=f"no pixel above rho={rho}; lower rho")
    return selected


def kmeans_pp(x, n, rng):
    """k-means++ seeding; returns indices of the chosen centers."""
    first = int(rng.integers(len(x)))
    chosen = [first]
    d2 = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, n):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; take the lowest unused index
            idx = next(i for i in range(len(x)) if i not in chosen)
        else:
            idx = int(rng.choice(len(x), p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(chosen)


def _log_gaussians(x, means, covs):
    """(N, C) matrix of log N(x_n | mu_c, Sigma_c)."""
    n, f = x.shape
    out = np.empty((n, len(means)))
    for c, (mu, cov) in enumerate(zip(means, covs)):
        chol = np.linalg.cholesky(cov)
        sol = np.linalg.solve(chol, (x - mu).T)
        out[:, c] = -0.5 * np.sum(sol * sol, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * f * np.log(2 * np.pi)
    return out


def _moments(x, resp, reg):
    nk = resp.sum(axis=0)
    means = (resp.T @ x) / nk[:, None]
    covs = []
    for c in range(resp.shape[1]):
        d = x - means[c]
        covs.append((resp[:, c, None] * d).T @ d / nk[c] + reg * np.eye(x.shape[1]))
    return nk / nk.sum(), means, np.array(covs)


@dataclass
class EmTrace:
    log_likelihood: list  # mean per-sample log-likelihood after each E-step
    iterations: int
    converged: bool


def fit_class_em(x, n_components, reg=1e-4, max_iters=200, tol=1e-6, rng=None):
    """EM for one class; returns ``(weights, means, covs, trace)``.

    Initialization is k-means++ seeding followed by a hard nearest-center split;
    ties go to the lowest center index.
    """
    x = np.asarray(x, dtype=np.float64)
    n, f = x.shape
    rng = np.random.default_rng(0) if rng is None else rng
    if n_components == 1:
        resp = np.ones((n, 1))
    else:
        centers = x[kmeans_pp(x, n_components, rng)]
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        assign = np.argmin(d2, axis=1)
        resp = np.eye(n_components)[assign]
        # an empty hard cluster would have no moments; seed it with its center point
        for c in np.flatnonzero(resp.sum(axis=0) == 0):
            resp[np.argmin(d2[:, c])] = np.eye(n_components)[c]
    weights, means, covs = _moments(x, resp, reg)
    lls = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        logp = _log_gaussians(x, means, covs) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        if not np.isfinite(ll):
            raise NumericalError("non-finite likelihood in EM")
        lls.append(ll)
        if len(lls) > 1 and lls[-1] - lls[-2] < tol:
            converged = True
            break
        resp = np.exp(logp - norm[:, None])
        weights, means, covs = _moments(x, resp, reg)
    return weights, means, covs, EmTrace(lls, it, converged)


def fit_em(samples, components_per_class=3, reg=1e-4, max_iters=200, tol=1e-6, seed=0, rho=0.0):
    """Fit the class-conditional mixture to per-class latent sets.

    ``samples`` is a list (index = class) of (n_k, F) arrays, or a SelectedPixelSet.
    Returns ``(InternalDistribution, traces)``.
    """
    if isinstance(samples, SelectedPixelSet):
        rho = samples.rho
        samples = samples.latents
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    f = samples[0].shape[1]
    w = components_per_class
    if w < 1:
        raise ValueError("components_per_class must be >= 1")
    counts = [len(s) for s in samples]
    starved = [k for k, n in enumerate(counts) if n < w * f]
    if starved:
        raise StarvedClassError(starved, counts, hint=f"need >= {w * f} samples per class; lower rho")
    all_w, all_mu, all_cov, traces = [], [], [], []
    for k, x in enumerate(samples):
        wk, mk, ck, tr = fit_class_em(x, w, reg, max_iters, tol, np.random.default_rng([seed, k]))
        all_w.append(wk)
        all_mu.append(mk)
        all_cov.append(ck)
        traces.append(tr)
    priors = np.array(counts, dtype=np.float64) / sum(counts)
    dist = InternalDistribution(
        num_classes=len(samples),
        components_per_class=w,
        weights=np.concatenate(all_w),
        means=np.concatenate(all_mu),
        covariances=np.concatenate(all_cov),
        rho=rho,
        reg=reg,
        class_priors=priors,
    )
    return dist, traces


def sample(dist: InternalDistribution, class_proportions, n, rng) -> PseudoDataset:
    props = dist._proportions(class_proportions)
    chol = dist.cholesky()
    labels = rng.choice(dist.num_classes, size=n, p=props)
    w = dist.components_per_class
    comps = np.empty(n, dtype=np.int64)
    for k in range(dist.num_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            cw = dist.weights[dist.class_slice(k)]
            comps[idx] = k * w + rng.choice(w, size=idx.size, p=cw / cw.sum())
    eps = rng.normal(size=(n, dist.dim))
    z = dist.means[comps] + np.einsum("nij,nj->ni", chol[comps], eps)
    return PseudoDataset(z, labels.astype(np.int64), comps)


def log_density(dist: InternalDistribution, z, class_proportions=None):
    """log P(z) under the mixture; ``z`` may be (F,) or (N, F)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    pts = z[None] if single else z
    gw = dist.global_weights(class_proportions)
    with np.errstate(divide="ignore"):
        logw = np.log(gw)
    out = logsumexp(_log_gaussians(pts, dist.means, dist.covariances) + logw, axis=1)
    return float(out[0]) if single else out
