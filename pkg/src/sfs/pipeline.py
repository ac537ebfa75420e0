"""Source training, internal-distribution estimation, source-free adaptation, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gmm as gmm_mod
from .config import Config, OptimConfig, SfsConfig
from .datagen import LabeledImage, augment, generate_dataset, preprocess, with_seed
from .gmm import InternalDistribution, StarvedClassError
from .metrics import average_scores, migration_table, score_image
from .network import (
    DECODER,
    ENCODER,
    NumericalError,
    SegNetwork,
    backward,
    ce_logit_grad,
    ce_loss,
    classifier_grads,
    forward,
    init_network,
    predict,
)
from .optim import AdamState, sgd_step
from .swd import latent_field_to_points, sample_projections, scatter_points_grad, swd

log = logging.getLogger(__name__)


@dataclass
class Split:
    """Preprocessed images and masks as stacked arrays."""

    images: np.ndarray  # (N, H, W)
    masks: np.ndarray  # (N, H, W) uint8

    @classmethod
    def from_images(cls, images: list[LabeledImage], normalize=True):
        if normalize:
            images = preprocess(images)
        return cls(np.stack([i.pixels for i in images]), np.stack([i.mask for i in images]))

    def __len__(self):
        return len(self.images)


@dataclass
class Datasets:
    source_train: Split
    source_val: Split
    target_train: Split
    target_test: Split


def generate_raw(cfg: Config):
    """Raw (un-normalized) images for the four splits."""
    d = cfg.data
    return {
        "source_train": generate_dataset(with_seed(d.scene, d.source_seed), d.source_modality, d.n_source_train),
        "source_val": generate_dataset(with_seed(d.scene, d.source_val_seed), d.source_modality, d.n_source_val),
        "target_train": generate_dataset(with_seed(d.scene, d.target_seed), d.target_modality, d.n_target_train),
        "target_test": generate_dataset(with_seed(d.scene, d.target_test_seed), d.target_modality, d.n_target_test),
    }


def build_datasets(cfg: Config) -> Datasets:
    raw = generate_raw(cfg)
    return Datasets(**{k: Split.from_images(v) for k, v in raw.items()})


def _adam(oc: OptimConfig):
    return AdamState(lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps, decay=oc.decay)


def class_weights_from(masks, k):
    counts = np.bincount(np.asarray(masks).ravel(), minlength=k).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / (k * np.maximum(counts, 1)), 0.0)
    return w / w[counts > 0].mean()


def macro_dice(net, split: Split, num_classes):
    preds = predict(net, split.images)
    scores = [score_image(p, t, num_classes) for p, t in zip(preds, split.masks)]
    # dice only; skip the brute-force ASSD in the training loop
    vals = []
    for k in range(1, num_classes):
        d = [s.dice[k] for s in scores if s.dice[k] is not None]
        if d:
            vals.append(np.mean(d))
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (step, ce)
    val: list = field(default_factory=list)  # (step, macro dice)
    best_step: int = 0
    best_dice: float = -1.0


def train_source(cfg: Config, train: Split, val: Split | None = None, net: SegNetwork | None = None):
    """Supervised cross-entropy training with Adam; returns the best-validation net."""
    sc = cfg.sfs
    h, w = train.images.shape[1:]
    k = cfg.data.scene.num_classes
    if net is None:
        net = init_network(h, w, k, cfg.network.latent_dim, cfg.network.enc_channels, cfg.network.init_seed,
                           latent_relu=cfg.network.latent_relu)
    net = net.copy()
    weights = class_weights_from(train.masks, k) if sc.class_weighted_ce else None
    state = _adam(sc.source_optim)
    rng = np.random.default_rng([sc.seed, 1])
    bs = min(sc.batch_size, len(train))
    tlog = TrainLog()
    best = net.copy()
    for step in range(1, sc.source_iters + 1):
        idx = rng.choice(len(train), size=bs, replace=False)
        x, y = train.images[idx], train.masks[idx]
        if sc.augment:
            aug = [augment(LabeledImage(xi, yi), rng, sc.augmentation) for xi, yi in zip(x, y)]
            x = np.stack([a.pixels for a in aug])
            y = np.stack([a.mask for a in aug])
        _, probs, cache = forward(net, x, keep_cache=True)
        loss = ce_loss(probs, y, weights)
        if not np.isfinite(loss):
            raise NumericalError(f"source training diverged at step {step} (loss {loss})")
        grads = backward(net, cache, dlogits=ce_logit_grad(probs, y, weights))
        sgd_step(net, grads, state)
        tlog.steps.append((step, loss))
        if val is not None and (step % sc.eval_every == 0 or step == sc.source_iters):
            d = macro_dice(net, val, k)
            tlog.val.append((step, d))
            log.info("source step %d ce %.4f val dice %.4f", step, loss, d)
            if d > tlog.best_dice:
                tlog.best_dice, tlog.best_step = d, step
                best = net.copy()
    if val is None:
        best = net
        tlog.best_step = sc.source_iters
    return best, tlog


def estimate_internal(net: SegNetwork, train: Split, cfg: Config, rho=None, omega=None):
    """Confident-pixel selection followed by per-class EM.

    Returns ``(distribution, selected_counts)``.
    """
    sc = cfg.sfs
    rho = sc.rho if rho is None else rho
    omega = sc.omega if omega is None else omega
    try:
        selected = gmm_mod.select_confident(net, train.images, train.masks, rho)
        dist, _ = gmm_mod.fit_em(selected, omega, sc.em_reg, sc.em_max_iters, sc.em_tol, seed=sc.seed)
    except StarvedClassError as exc:
        raise StarvedClassError(exc.classes, exc.counts, hint=f"rho={rho}: lower rho") from exc
    return dist, selected.counts


@dataclass
class AdaptLog:
    rows: list = field(default_factory=list)  # (step, ce, swd, total)

    def swd_series(self):
        return np.array([r[2] for r in self.rows])


def adapt(net: SegNetwork, dist: InternalDistribution, target_images, sc: SfsConfig, callback=None):
    """Align target embeddings with the internal distribution; no source data involved.

    Each step: draw GMM samples with the configured class proportions, fine-tune the classifier on them (optional) and pull the target
    latent subsample toward them with the sliced Wasserstein distance.
    """
    x_all = np.asarray(target_images, dtype=np.float64)
    if len(x_all) == 0:
        raise ValueError("empty target set")
    net = net.copy()
    state = _adam(sc.adapt_optim)
    rng = np.random.default_rng([sc.seed, 2])
    bs = min(sc.batch_size, len(x_all))
    k = net.num_classes
    alog = AdaptLog()
    for step in range(1, sc.adapt_iters + 1):
        idx = rng.choice(len(x_all), size=bs, replace=False)
        latent, probs, cache = forward(net, x_all[idx], keep_cache=True)
        if sc.class_proportions == "batch_pseudo":
            pseudo = probs.argmax(axis=-1)
            props = np.bincount(pseudo.ravel(), minlength=k) / pseudo.size
        else:
            props = None
        m = min(sc.pixels_per_batch, probs[..., 0].size)
        pseudo_data = gmm_mod.sample(dist, props, m, rng)
        grads = None
        ce = 0.0
        if sc.finetune_classifier:
            ce, grads = classifier_grads(net, pseudo_data.z, pseudo_data.y)
        dist_val = 0.0
        if sc.lam > 0:
            pts, where = latent_field_to_points(latent, m, rng)
            bank = sample_projections(net.latent_dim, sc.projections, rng)
            res = swd(pts, pseudo_data.z, bank)
            dist_val = res.distance
            dlatent = scatter_points_grad(sc.lam * res.grad_a, where, latent.shape)
            g_align = backward(net, cache, dlatent=dlatent)
            if grads is None:
                grads = g_align
            else:
                for name in ENCODER + DECODER:
                    grads[name] = g_align[name]
        total = ce + sc.lam * dist_val
        if not np.isfinite(total):
            raise NumericalError(f"adaptation loss became non-finite at step {step}")
        alog.rows.append((step, ce, dist_val, total))
        if grads is not None:
            sgd_step(net, grads, state)
        if step % sc.eval_every == 0:
            log.info("adapt step %d ce %.4f swd %.4f", step, ce, dist_val)
            if callback is not None:
                callback(step, net)
    return net, alog


@dataclass
class EvalReport:
    num_classes: int
    per_image: list  # ClassScores per image
    mean: object  # ClassScores averaged over images
    predictions: np.ndarray
    migration: object = None  # MigrationTable or None
    embeddings: np.ndarray | None = None  # (n, F)
    embed_pred: np.ndarray | None = None
    embed_true: np.ndarray | None = None

    @property
    def macro_dice(self):
        return self.mean.macro_dice()

    @property
    def macro_assd(self):
        return self.mean.macro_assd()

    def summary(self):
        return {
            "macro_dice": self.macro_dice,
            "macro_assd": self.macro_assd,
            "dice": self.mean.dice,
            "assd": self.mean.assd,
        }


def evaluate(net: SegNetwork, test: Split, baseline_pred=None, embed_pixels=64, seed=0):
    k = net.num_classes
    preds = predict(net, test.images)
    per_image = [score_image(p, t, k) for p, t in zip(preds, test.masks)]
    report = EvalReport(k, per_image, average_scores(per_image, k), preds)
    if baseline_pred is not None:
        report.migration = migration_table(baseline_pred, preds, test.masks, k)
    if embed_pixels > 0:
        rng = np.random.default_rng([seed, 3])
        feats, p_lab, t_lab = [], [], []
        for i in range(len(test)):
            latent, probs = forward(net, test.images[i])
            n = min(embed_pixels, latent.shape[0] * latent.shape[1])
            pts, where = latent_field_to_points(latent, n, rng)
            feats.append(pts)
            p_lab.append(probs.reshape(-1, k).argmax(axis=1)[where])
            t_lab.append(test.masks[i].reshape(-1)[where])
        report.embeddings = np.concatenate(feats)
        report.embed_pred = np.concatenate(p_lab)
        report.embed_true = np.concatenate(t_lab)
    return report


@dataclass
class SfsRun:
    source_net: SegNetwork
    adapted_net: SegNetwork
    dist: InternalDistribution
    selected_counts: list
    source_log: TrainLog
    adapt_log: AdaptLog
    source_report: EvalReport
    adapted_report: EvalReport


def run_sfs(cfg: Config, data: Datasets | None = None, source_net=None, source_log=None):
    """Full pipeline in memory. A pre-trained ``source_net`` skips source training."""
    data = build_datasets(cfg) if data is None else data
    if source_net is None:
        source_net, source_log = train_source(cfg, data.source_train, data.source_val)
    dist, counts = estimate_internal(source_net, data.source_train, cfg)
    adapted, alog = adapt(source_net, dist, data.target_train.images, cfg.sfs)
    ep = cfg.evaluation.embed_pixels_per_image
    pre = evaluate(source_net, data.target_test, embed_pixels=ep, seed=cfg.sfs.seed)
    post = evaluate(adapted, data.target_test, baseline_pred=pre.predictions, embed_pixels=ep, seed=cfg.sfs.seed)
    return SfsRun(source_net, adapted, dist, counts, source_log, alog, pre, post)


def ablation_configs(kind, grid, base: Config):
    out = []
    for value in grid:
        if kind == "omega":
            out.append((value, base.replace(sfs={"omega": int(value)})))
        elif kind == "rho":
            out.append((value, base.replace(sfs={"rho": float(value)})))
        elif kind == "finetune":
            out.append((value, base.replace(sfs={"finetune_classifier": bool(value)})))
        else:
            raise ValueError(f"unknown ablation kind {kind!r}")
    return out


ABLATION_FIELDS = ["kind", "value", "status", "macro_dice", "macro_assd", "source_macro_dice", "selected_pixels"]


def ablate(kind, grid, base: Config, data: Datasets | None = None, source_net=None):
    """One SFS run per grid value with shared data, seeds and source network.

    Returns a list of row dicts; failing grid points are recorded with
    ``status='failed: ...'`` and the sweep continues.
    """
    data = build_datasets(base) if data is None else data
    if source_net is None:
        source_net, _ = train_source(base, data.source_train, data.source_val)
    k = base.data.scene.num_classes
    rows = []
    for value, cfg in ablation_configs(kind, grid, base):
        row = {"kind": kind, "value": value}
        try:
            run = run_sfs(cfg, data, source_net=source_net)
        except (NumericalError, ValueError) as exc:
            row.update(status=f"failed: {exc}")
            rows.append(row)
            continue
        row.update(
            status="ok",
            macro_dice=run.adapted_report.macro_dice,
            macro_assd=run.adapted_report.macro_assd,
            source_macro_dice=run.source_report.macro_dice,
            selected_pixels=sum(run.selected_counts),
        )
        for c in range(k):
            row[f"dice_{c}"] = run.adapted_report.mean.dice[c]
            row[f"assd_{c}"] = run.adapted_report.mean.assd[c]
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    if ok:
        ref = ok[0]["macro_dice"]
        for r in rows:
            if r["status"] == "ok":
                r["dice_diff"] = r["macro_dice"] - ref
    return rows
