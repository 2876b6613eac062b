"""Metric suite: foreground ARI, MSE, IOU + optimal matching, activeness,
traversal ranges, DCI, structural property checks, and a timing bench."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .data.format import DatasetView
from .data.generate import factor_matrix
from .model import EfficientMorl
from .trainer import images_to_tensor


# ---------------------------------------------------------------------------
# Segmentation metrics


def ari(
    true_labels: np.ndarray,
    pred_labels: np.ndarray,
    exclude_background: bool = True,
) -> float | None:
    """Adjusted Rand index between two pixel labelings.

    With exclude_background, only pixels whose true label is nonzero count;
    returns None (a skip, not a zero) when no foreground pixel exists.
    """
    t = np.asarray(true_labels).reshape(-1)
    p = np.asarray(pred_labels).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"label shapes differ: {t.shape} vs {p.shape}")
    if exclude_background:
        keep = t != 0
        if not keep.any():
            return None
        t, p = t[keep], p[keep]
    n = t.size
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    contingency = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(contingency, (ti, pi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(contingency).sum()
    a = comb2(contingency.sum(axis=1)).sum()
    b = comb2(contingency.sum(axis=0)).sum()
    total = comb2(np.float64(n))
    expected = a * b / total if total > 0 else 0.0
    max_index = (a + b) / 2.0
    denom = max_index - expected
    if denom == 0:
        return 1.0
    return float((sum_ij - expected) / denom)


def mse(x: np.ndarray, reconstruction: np.ndarray) -> float:
    """Mean over all pixels and channels of the squared error (background included)."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(reconstruction, dtype=np.float64)
    if x.shape != r.shape:
        raise ValueError(f"shapes differ: {x.shape} vs {r.shape}")
    return float(np.mean((x - r) ** 2))


def iou_matrix(true_masks: np.ndarray, pred_masks: np.ndarray) -> np.ndarray:
    """(G, K) IOU between boolean mask stacks."""
    g = true_masks.reshape(true_masks.shape[0], -1).astype(bool)
    k = pred_masks.reshape(pred_masks.shape[0], -1).astype(bool)
    inter = g.astype(np.float64) @ k.T.astype(np.float64)
    union = g.sum(1)[:, None] + k.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


@dataclass
class MatchResult:
    assignment: np.ndarray  # (G,) slot index per ground-truth object
    iou: np.ndarray         # the (G, K) cost matrix that was matched
    total: float            # summed IOU of the optimal assignment


def hungarian_match(iou: np.ndarray) -> MatchResult:
    """Optimal injective object->slot assignment maximizing total IOU."""
    iou = np.asarray(iou, dtype=np.float64)
    g, k = iou.shape
    if g > k:
        raise ValueError(f"need at least as many slots as objects, got {g}x{k}")
    rows, cols = linear_sum_assignment(-iou)
    assignment = np.empty(g, dtype=np.int64)
    assignment[rows] = cols
    return MatchResult(
        assignment=assignment, iou=iou, total=float(iou[rows, cols].sum())
    )


# ---------------------------------------------------------------------------
# Model-level evaluation


def predicted_labels(pi: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax over the K soft masks; pi is (K, H, W) or (B, K, H, W)."""
    return pi.argmax(dim=-3).cpu().numpy()


@dataclass
class EvalSummary:
    ari_mean: float
    mse_mean: float
    n_scenes: int
    n_skipped: int
    steps: int
    num_slots: int


def evaluate_segmentation(
    model: EfficientMorl,
    view: DatasetView,
    steps: int,
    num_slots: int | None = None,
    batch_size: int = 16,
    seed: int = 0,
    max_scenes: int | None = None,
) -> EvalSummary:
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    k = num_slots if num_slots is not None else model.cfg.num_slots
    n = len(view) if max_scenes is None else min(max_scenes, len(view))
    aris: list[float] = []
    mses: list[float] = []
    skipped = 0
    for start in range(0, n, batch_size):
        scenes = [view[i] for i in range(start, min(start + batch_size, n))]
        images = images_to_tensor(scenes)
        result = model.infer(images, steps=steps, num_slots=k, generator=gen)
        out = result.reconstruction_output
        labels = predicted_labels(out.pi)
        recon = out.composite().detach().cpu().numpy()
        for j, scene in enumerate(scenes):
            score = ari(scene.labels, labels[j], exclude_background=True)
            if score is None:
                skipped += 1
            else:
                aris.append(score)
            img = scene.image.astype(np.float64) / 255.0
            mses.append(mse(img, recon[j].transpose(1, 2, 0)))
    return EvalSummary(
        ari_mean=float(np.mean(aris)) if aris else float("nan"),
        mse_mean=float(np.mean(mses)) if mses else float("nan"),
        n_scenes=n, n_skipped=skipped, steps=steps, num_slots=k,
    )


def posterior_means(
    model: EfficientMorl,
    view: DatasetView,
    steps: int,
    n_scenes: int,
    num_slots: int | None = None,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[np.ndarray, list]:
    """Final posterior means for the first n_scenes; returns ((N, K, D), scenes)."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    n = min(n_scenes, len(view))
    mus = []
    scenes = []
    for start in range(0, n, batch_size):
        chunk = [view[i] for i in range(start, min(start + batch_size, n))]
        images = images_to_tensor(chunk)
        result = model.infer(images, steps=steps, num_slots=num_slots, generator=gen)
        mus.append(result.final_posterior.mu.detach().cpu().numpy())
        scenes.extend(chunk)
    return np.concatenate(mus, axis=0), scenes


def traversal_ranges(means: np.ndarray) -> np.ndarray:
    """(D, 2) coordinate-wise min/max of posterior means over scenes and slots."""
    flat = means.reshape(-1, means.shape[-1])
    return np.stack([flat.min(axis=0), flat.max(axis=0)], axis=1)


def activeness(
    model: EfficientMorl,
    view: DatasetView,
    n_scenes: int = 100,
    steps: int = 0,
    grid: int = 8,
    seed: int = 0,
    batch_size: int = 16,
) -> np.ndarray:
    """Mean reconstructed-image variance from sweeping each latent dimension of
    one uniformly chosen slot per image; returns a (D,) score vector."""
    means, _ = posterior_means(
        model, view, steps=steps, n_scenes=n_scenes, batch_size=batch_size, seed=seed
    )
    n, k, d = means.shape
    ranges = traversal_ranges(means)
    rng = np.random.default_rng(seed)
    slot_choice = rng.integers(0, k, size=n)
    scores = np.zeros(d)
    model.eval()
    with torch.no_grad():
        for img_idx in range(n):
            base = torch.from_numpy(means[img_idx]).to(torch.float32)
            slot = int(slot_choice[img_idx])
            for dim in range(d):
                sweep = base.unsqueeze(0).repeat(grid, 1, 1)
                sweep[:, slot, dim] = torch.linspace(
                    float(ranges[dim, 0]), float(ranges[dim, 1]), grid
                )
                decoded = model.decoder(sweep)
                recon = decoded.composite()  # (grid, 3, H, W)
                scores[dim] += float(recon.var(dim=0, unbiased=False).mean())
    return scores / n


# ---------------------------------------------------------------------------
# DCI


@dataclass
class DciResult:
    disentanglement: float
    completeness: float
    informativeness: float
    importance: np.ndarray          # (D, F)
    per_factor_score: dict[str, float]
    predictor: str
    skipped_factors: list[str] = field(default_factory=list)


def _entropy(p: np.ndarray, base: int) -> np.ndarray:
    p = p + 1e-11
    p = p / p.sum(axis=0, keepdims=True)
    if base <= 1:  # a single row is trivially concentrated
        return np.zeros(p.shape[1])
    return -(p * np.log(p)).sum(axis=0) / np.log(base)


def dci_from_importance(importance: np.ndarray) -> tuple[float, float]:
    """Disentanglement/completeness from a (D latents, F factors) importance matrix."""
    imp = np.asarray(importance, dtype=np.float64)
    d, f = imp.shape
    per_code = 1.0 - _entropy(imp.T, base=f)  # entropy across factors per latent
    per_factor = 1.0 - _entropy(imp, base=d)  # entropy across latents per factor
    total = imp.sum()
    if total == 0:
        imp = np.ones_like(imp)
        total = imp.sum()
    code_w = imp.sum(axis=1) / total
    factor_w = imp.sum(axis=0) / total
    return float((per_code * code_w).sum()), float((per_factor * factor_w).sum())


def matched_latent_factors(
    model: EfficientMorl,
    view: DatasetView,
    n_scenes: int,
    steps: int = 1,
    seed: int = 0,
    batch_size: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """Pairs (slot latent mean, ground-truth factor row) matched by mask IOU."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    n = min(n_scenes, len(view))
    latents, factors = [], []
    for start in range(0, n, batch_size):
        scenes = [view[i] for i in range(start, min(start + batch_size, n))]
        images = images_to_tensor(scenes)
        result = model.infer(images, steps=steps, generator=gen)
        out = result.reconstruction_output
        mu = result.final_posterior.mu.detach().cpu().numpy()
        labels = predicted_labels(out.pi)
        k = out.pi.shape[1]
        for j, scene in enumerate(scenes):
            n_obj = scene.true_masks.shape[0] - 1
            if n_obj == 0 or n_obj > k:
                continue
            pred_masks = np.stack([labels[j] == s for s in range(k)])
            match = hungarian_match(iou_matrix(scene.true_masks[1:], pred_masks))
            fm = factor_matrix(scene.factors)
            for g, slot in enumerate(match.assignment):
                latents.append(mu[j, slot])
                factors.append(fm[g])
    return np.asarray(latents), np.asarray(factors)


def dci(
    latents: np.ndarray,
    factors: np.ndarray,
    factor_kinds: list[tuple[str, str]],
    seed: int = 0,
    test_fraction: float = 0.5,
    n_estimators: int = 40,
) -> DciResult:
    """DCI scores from per-factor gradient-boosted-tree predictors.

    Discrete factors use a classifier scored by accuracy; continuous factors a
    regressor scored by R^2 floored at 0. Constant factors are skipped.
    """
    from sklearn.ensemble import GradientBoostingClassifier, GradientBoostingRegressor

    if latents.shape[0] != factors.shape[0]:
        raise ValueError("latents and factors must pair up")
    if latents.shape[0] < 4:
        raise ValueError("need at least 4 matched pairs for a train/test split")
    rng = np.random.default_rng(seed)
    n = latents.shape[0]
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    xs_tr, xs_te = latents[train_idx], latents[test_idx]
    columns = []
    info_scores = {}
    skipped = []
    for j, (name, kind) in enumerate(factor_kinds):
        y = factors[:, j]
        if np.unique(y).size < 2:
            skipped.append(name)
            continue
        y_tr, y_te = y[train_idx], y[test_idx]
        if kind == "discrete":
            clf = GradientBoostingClassifier(
                n_estimators=n_estimators, max_depth=3, random_state=seed
            )
            clf.fit(xs_tr, y_tr.astype(np.int64))
            score = float(clf.score(xs_te, y_te.astype(np.int64)))
        else:
            clf = GradientBoostingRegressor(
                n_estimators=n_estimators, max_depth=3, random_state=seed
            )
            clf.fit(xs_tr, y_tr)
            score = max(0.0, float(clf.score(xs_te, y_te)))
        columns.append(clf.feature_importances_)
        info_scores[name] = score
    if not columns:
        raise ValueError("all factors degenerate; cannot compute DCI")
    importance = np.stack(columns, axis=1)  # (D, F_kept)
    disent, complete = dci_from_importance(importance)
    return DciResult(
        disentanglement=disent,
        completeness=complete,
        informativeness=float(np.mean(list(info_scores.values()))),
        importance=importance,
        per_factor_score=info_scores,
        predictor="sklearn.GradientBoosting (trees)",
        skipped_factors=skipped,
    )


# ---------------------------------------------------------------------------
# Structural property checks


@dataclass
class PropertyCheck:
    name: str
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def _max_abs(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).detach().abs().max())


def run_property_checks(
    model: EfficientMorl,
    batch: int = 2,
    steps: int = 2,
    seed: int = 0,
) -> list[PropertyCheck]:
    """Equivariance / invariance / simplex / identity-refinement checks against
    a live model (run on copies where the check needs surgery)."""
    model.eval()
    cfg = model.cfg
    k, d, el = cfg.num_slots, cfg.latent_dim, cfg.num_layers
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(batch, 3, cfg.image_height, cfg.image_width, generator=gen)
    noise = torch.randn(batch, el + 1, k, d, generator=gen)
    refine_noise = torch.randn(steps, batch, k, d, generator=gen)
    perm = torch.randperm(k, generator=gen)

    out = model(images, steps, noise=noise, refine_noise=refine_noise)
    out_p = model(
        images, steps, noise=noise[:, :, perm], refine_noise=refine_noise[:, :, perm]
    )

    dev = 0.0
    for lam, lam_p in zip(out.trajectory.posteriors, out_p.trajectory.posteriors):
        dev = max(dev, _max_abs(lam.mu[:, perm], lam_p.mu))
        dev = max(dev, _max_abs(lam.sigma[:, perm], lam_p.sigma))
    for z, z_p in zip(out.trajectory.samples, out_p.trajectory.samples):
        dev = max(dev, _max_abs(z[:, perm], z_p))
    dev = max(dev, _max_abs(out.stage1_decoded.pi[:, perm], out_p.stage1_decoded.pi))
    dev = max(dev, _max_abs(out.stage1_decoded.y[:, perm], out_p.stage1_decoded.y))
    for lam, lam_p in zip(out.trace.posteriors, out_p.trace.posteriors):
        dev = max(dev, _max_abs(lam.mu[:, perm], lam_p.mu))
        dev = max(dev, _max_abs(lam.sigma[:, perm], lam_p.sigma))
    checks = [PropertyCheck("slot_equivariance", dev, 1e-6)]

    # token-order invariance of the final posterior
    embedding = model.encoder(images)
    n = embedding.tokens.shape[1]
    token_perm = torch.randperm(n, generator=gen)
    traj = model.posterior(embedding.tokens, k, noise=noise)
    traj_p = model.posterior(embedding.tokens[:, token_perm], k, noise=noise)
    dev = max(
        _max_abs(traj.final.mu, traj_p.final.mu),
        _max_abs(traj.final.sigma, traj_p.final.sigma),
    )
    checks.append(PropertyCheck("token_order_invariance", dev, 1e-5))

    pi_sum = out.stage1_decoded.pi.detach().sum(dim=1)
    checks.append(
        PropertyCheck("mask_simplex", float((pi_sum - 1).abs().max()), 1e-6)
    )

    frozen = copy.deepcopy(model)
    frozen.refiner.zero_update_init_()
    out_id = frozen(images, steps, noise=noise, refine_noise=refine_noise)
    lam0 = out_id.trace.posteriors[0]
    lam_last = out_id.trace.final
    dev = max(_max_abs(lam0.mu, lam_last.mu), _max_abs(lam0.sigma, lam_last.sigma))
    checks.append(PropertyCheck("identity_refinement", dev, 1e-4))
    return checks


# ---------------------------------------------------------------------------
# Timing bench


@dataclass
class BenchRow:
    steps: int
    forward_s: float
    forward_backward_s: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    batch_size: int
    image_size: tuple[int, int]
    passes: int
    num_parameters: int


def bench(
    model: EfficientMorl,
    steps_list: tuple[int, ...] = (0, 1, 3),
    passes: int = 10,
    warmup: int = 2,
    batch_size: int = 4,
    seed: int = 0,
) -> BenchReport:
    """Mean forward and forward+backward wall time per batch for each I."""
    cfg = model.cfg
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(batch_size, 3, cfg.image_height, cfg.image_width, generator=gen)
    rows = []
    for steps in steps_list:
        for _ in range(warmup):
            model.infer(images, steps=steps)
        t0 = time.perf_counter()
        for _ in range(passes):
            model.infer(images, steps=steps)
        fwd = (time.perf_counter() - t0) / passes

        for _ in range(warmup):
            out = model(images, steps)
            out.total.mean().backward()
            model.zero_grad(set_to_none=True)
        t0 = time.perf_counter()
        for _ in range(passes):
            out = model(images, steps)
            out.total.mean().backward()
            model.zero_grad(set_to_none=True)
        fwd_bwd = (time.perf_counter() - t0) / passes
        rows.append(BenchRow(steps=steps, forward_s=fwd, forward_backward_s=fwd_bwd))
    return BenchReport(
        rows=rows, batch_size=batch_size,
        image_size=(cfg.image_height, cfg.image_width), passes=passes,
        num_parameters=model.num_parameters(),
    )
