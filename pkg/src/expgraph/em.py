"""Spatial-mixture machinery: compatibility densities, E/M steps, neighbor selection.

Every filter's activation entities are explained by a mixture over that
filter's pattern nodes plus a constant-density noise component.  A node's
compatibility with a unit position is a geometric mean of 2-D isotropic
Gaussians, one per neighbor in the layer above, each centered at
mu_V - mu_V' + p_V' (the node's prior position displaced by the neighbor's
observed offset).  That product collapses to a single Gaussian
N(p | mu_V + delta, sigma_tilde_sq) times a position-independent constant;
both routes are implemented and kept numerically comparable.

Dummy-rooted nodes (top layer) and images where none of a node's neighbors
were detected fall back to the node's own Gaussian N(p | mu_V, sigma_sq_V).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    InsufficientCandidates,
    MissingNeighborInference,
)
from .fmapio import Unit, UnitGrid
from .graph import SIGMA_SQ_MIN, NodeId, PatternNode

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ContextEntry:
    """Inferred position of one upper-layer node in one image."""

    p: tuple[float, float]
    score: float = 0.0
    detected: bool = True


ImageContext = dict  # NodeId -> ContextEntry


def dummy_context() -> ImageContext:
    """Context used when learning or inferring the top layer."""
    return {}


@dataclass
class FilterUnits:
    """Units of a single filter in a single image, as flat arrays."""

    filter_index: int
    positions: np.ndarray  # (n_units, 2)
    mass: np.ndarray  # (n_units,) activation-entity counts
    grid_index: np.ndarray | None = None  # (n_units, 2) int (i, j), optional


def filter_units_from_grid(grid: UnitGrid, d: int) -> FilterUnits:
    h, w = grid.meta.height, grid.meta.width
    idx = np.stack(
        [np.repeat(np.arange(h), w), np.tile(np.arange(w), h)], axis=1
    )
    return FilterUnits(
        filter_index=d,
        positions=grid.positions,
        mass=grid.mass[d],
        grid_index=idx,
    )


def _as_filter_units(units) -> FilterUnits:
    if isinstance(units, FilterUnits):
        return units
    units = list(units)
    if not units or not isinstance(units[0], Unit):
        raise TypeError("expected FilterUnits or a non-empty list of Unit")
    d = units[0].d
    if any(u.d != d for u in units):
        raise ValueError("units must all belong to one filter")
    return FilterUnits(
        filter_index=d,
        positions=np.array([u.p for u in units], dtype=np.float64),
        mass=np.array([u.mass for u in units], dtype=np.float64),
        grid_index=np.array([(u.i, u.j) for u in units], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# density cores


def _gauss_log_point(p: np.ndarray, mean: np.ndarray, sigma_sq: float) -> float:
    diff = p - mean
    return float(-(LOG_TWO_PI + math.log(sigma_sq)) - (diff @ diff) / (2.0 * sigma_sq))


def _neighbor_arrays(node: PatternNode, upper_nodes: Mapping, contexts: Sequence[ImageContext]):
    """Gather neighbor priors and per-image inference results for a node.

    Returns None for dummy-rooted nodes, else (nbr_mu (m,2), nbr_s2 (m,),
    pos (n_img,m,2), det (n_img,m)).
    """
    if node.is_dummy_rooted:
        return None
    mus, s2s = [], []
    for e in node.edges:
        try:
            up = upper_nodes[e]
        except KeyError:
            raise MissingNeighborInference(
                f"node {node.node_id}: neighbor {e} not among upper-layer nodes"
            ) from None
        mus.append(up.mu)
        s2s.append(up.sigma_sq)
    m = len(node.edges)
    nbr_mu = np.array(mus, dtype=np.float64)
    nbr_s2 = np.array(s2s, dtype=np.float64)
    pos = np.zeros((len(contexts), m, 2))
    det = np.zeros((len(contexts), m), dtype=bool)
    for ii, ctx in enumerate(contexts):
        for jj, e in enumerate(node.edges):
            entry = ctx.get(e)
            if entry is None:
                raise MissingNeighborInference(
                    f"node {node.node_id}: no inference for neighbor {e} in image {ii}"
                )
            pos[ii, jj] = entry.p
            det[ii, jj] = entry.detected
    return nbr_mu, nbr_s2, pos, det


def _shift_stats(node: PatternNode, nbrs, n_img: int):
    """Per-image closed-form parameters (delta, sigma_tilde_sq, log_const).

    log product-density(p) = logN(p | mu + delta, sigma_tilde_sq) + log_const.
    """
    if nbrs is None:
        return (
            np.zeros((n_img, 2)),
            np.full(n_img, node.sigma_sq),
            np.zeros(n_img),
        )
    nbr_mu, nbr_s2, pos, det = nbrs
    w = 1.0 / nbr_s2
    wm = np.where(det, w, 0.0)
    b = wm.sum(axis=1)
    cnt = det.sum(axis=1)
    c = pos - nbr_mu
    a = (wm[..., None] * c).sum(axis=1)
    wc2 = (wm * (c * c).sum(axis=-1)).sum(axis=1)
    logz = np.where(det, LOG_TWO_PI + np.log(nbr_s2), 0.0).sum(axis=1)
    has = cnt > 0
    safe_b = np.where(has, b, 1.0)
    delta = np.where(has[:, None], a / safe_b[:, None], 0.0)
    sst = np.where(has, cnt / safe_b, node.sigma_sq)
    lam = 1.0 / np.maximum(cnt, 1)
    sc = wc2 - b * (delta * delta).sum(axis=-1)
    logc = np.where(has, np.log(2.0 * np.pi * sst) - lam * logz - lam * sc / 2.0, 0.0)
    return delta, sst, logc


def _log_density(positions: np.ndarray, mu_eff: np.ndarray, sst: np.ndarray, logc: np.ndarray):
    """Log product-density at unit positions.

    positions: (n_units, 2) shared or (n_img, n_units, 2); mu_eff (n_img, 2);
    sst, logc (n_img,).  Returns (n_img, n_units).
    """
    if positions.ndim == 2:
        positions = positions[None, :, :]
    diff = positions - mu_eff[:, None, :]
    r2 = (diff * diff).sum(axis=-1)
    return -(LOG_TWO_PI + np.log(sst))[:, None] - r2 / (2.0 * sst[:, None]) + logc[:, None]


def _batch_log_densities(nodes, upper_nodes, contexts, positions):
    """Stacked per-node log densities, shape (n_nodes, n_img, n_units)."""
    n_img = len(contexts)
    parts = []
    for node in nodes:
        delta, sst, logc = _shift_stats(node, _neighbor_arrays(node, upper_nodes, contexts), n_img)
        parts.append(_log_density(positions, node.mu + delta, sst, logc))
    return np.stack(parts, axis=0)


# ---------------------------------------------------------------------------
# compatibility (public, two routes)


def log_compatibility_product(p_x, node: PatternNode, upper_nodes: Mapping, ctx: ImageContext) -> float:
    """Literal geometric-mean-of-Gaussians route for log P(p_x | V, ...)."""
    p = np.asarray(p_x, dtype=np.float64)
    if node.is_dummy_rooted:
        return _gauss_log_point(p, node.mu, node.sigma_sq)
    terms = []
    for e in node.edges:
        try:
            up = upper_nodes[e]
        except KeyError:
            raise MissingNeighborInference(
                f"node {node.node_id}: neighbor {e} not among upper-layer nodes"
            ) from None
        entry = ctx.get(e)
        if entry is None:
            raise MissingNeighborInference(
                f"node {node.node_id}: no inference for neighbor {e}"
            )
        if not entry.detected:
            continue
        mean = node.mu - up.mu + np.asarray(entry.p)
        terms.append(_gauss_log_point(p, mean, up.sigma_sq))
    if not terms:
        return _gauss_log_point(p, node.mu, node.sigma_sq)
    return sum(terms) / len(terms)


def compatibility_product(p_x, node: PatternNode, upper_nodes: Mapping, ctx: ImageContext) -> float:
    return math.exp(log_compatibility_product(p_x, node, upper_nodes, ctx))


def compatibility_closed(p_x, node: PatternNode, upper_nodes: Mapping, ctx: ImageContext):
    """Collapsed single-Gaussian route.

    Returns (density, delta, sigma_tilde_sq): the exactly normalized
    Gaussian density at p_x, the per-image shift of the node's prior
    position, and the collapsed variance.  Differs from the product route
    by a factor constant in p_x.
    """
    p = np.asarray(p_x, dtype=np.float64)
    nbrs = _neighbor_arrays(node, upper_nodes, [ctx])
    delta, sst, _ = _shift_stats(node, nbrs, 1)
    density = math.exp(_gauss_log_point(p, node.mu + delta[0], float(sst[0])))
    return density, delta[0], float(sst[0])


# ---------------------------------------------------------------------------
# E step and likelihood


def _log_numerators(units: FilterUnits, nodes, upper_nodes, ctx, tau: float) -> np.ndarray:
    """(n_units, K+1) log[P(V) * dens(V, p)], last column the noise term."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    log_prior = -math.log(len(nodes) + 1)
    dens = _batch_log_densities(nodes, upper_nodes, [ctx], units.positions)[:, 0, :]
    out = np.empty((units.positions.shape[0], len(nodes) + 1))
    out[:, :-1] = dens.T + log_prior
    out[:, -1] = log_prior + math.log(tau)
    return out


def e_step(units, nodes, upper_nodes, ctx: ImageContext, tau: float) -> np.ndarray:
    """Responsibilities of each component for each unit, rows summing to 1.

    Columns follow the order of `nodes` with the noise component last.
    """
    fu = _as_filter_units(units)
    lognum = _log_numerators(fu, nodes, upper_nodes, ctx, tau)
    shifted = lognum - lognum.max(axis=1, keepdims=True)
    num = np.exp(shifted)
    return num / num.sum(axis=1, keepdims=True)


def filter_log_likelihood(units, nodes, upper_nodes, ctx: ImageContext, tau: float) -> float:
    """Mass-weighted log mixture density of one filter's units in one image."""
    fu = _as_filter_units(units)
    lognum = _log_numerators(fu, nodes, upper_nodes, ctx, tau)
    peak = lognum.max(axis=1)
    lse = peak + np.log(np.exp(lognum - peak[:, None]).sum(axis=1))
    return float((fu.mass * lse).sum())


# ---------------------------------------------------------------------------
# M step


def _per_image_moments(resp, units):
    """S0 = sum r*F, S1 = sum r*F*p for each image."""
    s0 = np.empty(len(units))
    s1 = np.empty((len(units), 2))
    fus = [_as_filter_units(u) for u in units]
    for ii, (r, fu) in enumerate(zip(resp, fus)):
        w = np.asarray(r) * fu.mass
        s0[ii] = w.sum()
        s1[ii] = w @ fu.positions
    return s0, s1, fus


def mu_gradient(node, resp, units, ctxs, upper_nodes) -> np.ndarray:
    """Gradient of the responsibility-weighted expected log joint w.r.t. mu.

    Per unit the term is resp * mass * (p - mu - delta_I) / sigma_tilde_sq_I,
    summed over all units of all images.
    """
    s0, s1, _ = _per_image_moments(resp, units)
    delta, sst, _ = _shift_stats(
        node, _neighbor_arrays(node, upper_nodes, ctxs), len(ctxs)
    )
    return (((s1 - (node.mu + delta) * s0[:, None])) / sst[:, None]).sum(axis=0)


def m_step_mu(node, resp, units, ctxs, upper_nodes, mode: str = "closed_form", eta: float = 0.05):
    """One position update for a node.

    closed_form: mu <- weighted mean of (p - delta_I), the exact maximizer
    of the fixed-responsibility objective.  gradient: mu <- mu + eta * grad.
    Returns (new_mu, total_weight); total_weight 0 means the node explains
    nothing and mu is returned unchanged.
    """
    if mode not in ("closed_form", "gradient"):
        raise ValueError(f"unknown m_step mode {mode!r}")
    s0, s1, _ = _per_image_moments(resp, units)
    total = s0.sum()
    if total == 0.0:
        return node.mu.copy(), 0.0
    if mode == "gradient":
        return node.mu + eta * mu_gradient(node, resp, units, ctxs, upper_nodes), total
    delta, _, _ = _shift_stats(
        node, _neighbor_arrays(node, upper_nodes, ctxs), len(ctxs)
    )
    return (s1 - delta * s0[:, None]).sum(axis=0) / total, total


def estimate_sigma(node, resp, units, ctxs, upper_nodes):
    """Empirical-variation estimate of the node's variance.

    Weighted mean of |p - mu - delta_I|^2 / 2 (per-axis variance from 2-D
    squared residuals), floored at SIGMA_SQ_MIN.  Returns (sigma_sq,
    total_weight); weight 0 keeps the previous variance.
    """
    delta, _, _ = _shift_stats(
        node, _neighbor_arrays(node, upper_nodes, ctxs), len(ctxs)
    )
    total = 0.0
    ss = 0.0
    for ii, (r, u) in enumerate(zip(resp, units)):
        fu = _as_filter_units(u)
        w = np.asarray(r) * fu.mass
        diff = fu.positions - (node.mu + delta[ii])
        ss += float(w @ (diff * diff).sum(axis=1))
        total += float(w.sum())
    if total == 0.0:
        return node.sigma_sq, 0.0
    return max(SIGMA_SQ_MIN, ss / (2.0 * total)), total


# ---------------------------------------------------------------------------
# greedy neighbor selection


def _candidate_context_arrays(candidates, ctxs):
    n_img = len(ctxs)
    pos = np.zeros((n_img, len(candidates), 2))
    det = np.zeros((n_img, len(candidates)), dtype=bool)
    for ii, ctx in enumerate(ctxs):
        for jj, cid in enumerate(candidates):
            entry = ctx.get(cid)
            if entry is None:
                raise MissingNeighborInference(
                    f"candidate {cid} has no inference in image {ii}"
                )
            pos[ii, jj] = entry.p
            det[ii, jj] = entry.detected
    return pos, det


def select_neighbors(
    node,
    candidates: Sequence[NodeId],
    m: int,
    *,
    units,
    ctxs,
    upper_nodes,
    peer_nodes,
    resp,
    tau: float,
    prior_count: int,
) -> tuple:
    """Greedy construction of the node's upper-layer neighbor set.

    Starting from the empty set, repeatedly adds the candidate that
    maximizes the total mass-weighted log likelihood of this filter's
    units over all images, re-fitting mu in closed form for each trial
    set.  Ties break toward the smallest node id.

    resp holds this node's responsibilities per image (from the current
    E step); peer_nodes are the filter's other pattern nodes, whose
    densities enter the mixture unchanged.
    """
    cands = sorted(set(candidates))
    if len(cands) < m:
        raise InsufficientCandidates(
            f"node {node.node_id}: {len(cands)} candidates for {m} neighbors"
        )
    n_img = len(ctxs)
    fus = [_as_filter_units(u) for u in units]
    positions = np.stack([fu.positions for fu in fus])  # (n_img, n_units, 2)
    mass = np.stack([fu.mass for fu in fus])

    prior = 1.0 / (prior_count + 1)
    rest = np.full(positions.shape[:2], prior * tau)
    for peer in peer_nodes:
        delta, sst, logc = _shift_stats(
            peer, _neighbor_arrays(peer, upper_nodes, ctxs), n_img
        )
        rest += prior * np.exp(_log_density(positions, peer.mu + delta, sst, logc))

    s0, s1, _ = _per_image_moments(resp, units)
    total_w = s0.sum()
    s1_sum = s1.sum(axis=0)

    cmu = np.array([upper_nodes[c].mu for c in cands])
    cs2 = np.array([upper_nodes[c].sigma_sq for c in cands])
    cpos, cdet = _candidate_context_arrays(cands, ctxs)
    cdisp = cpos - cmu  # (n_img, C, 2)
    cw = 1.0 / cs2

    acc_a = np.zeros((n_img, 2))
    acc_b = np.zeros(n_img)
    acc_cnt = np.zeros(n_img)
    acc_wc2 = np.zeros(n_img)
    acc_logz = np.zeros(n_img)

    n_units = positions.shape[1]
    shared_pos = all(fu.positions is fus[0].positions for fu in fus)
    p_sq = (positions * positions).sum(axis=-1)  # (n_img, n_units)
    chunk = max(1, 4_000_000 // max(1, n_img * n_units))
    selected: list[int] = []
    remaining = list(range(len(cands)))
    for _ in range(m):
        det = cdet[:, remaining]  # (n_img, R)
        w = cw[remaining]
        new_b = acc_b[:, None] + det * w
        new_cnt = acc_cnt[:, None] + det
        new_a = acc_a[:, None, :] + np.where(det[..., None], w[None, :, None] * cdisp[:, remaining], 0.0)
        new_wc2 = acc_wc2[:, None] + det * w * (cdisp[:, remaining] ** 2).sum(axis=-1)
        new_logz = acc_logz[:, None] + det * (LOG_TWO_PI + np.log(cs2[remaining]))

        has = new_cnt > 0
        safe_b = np.where(has, new_b, 1.0)
        delta = np.where(has[..., None], new_a / safe_b[..., None], 0.0)  # (n_img, R, 2)
        sst = np.where(has, new_cnt / safe_b, node.sigma_sq)
        lam = 1.0 / np.maximum(new_cnt, 1)
        sc = new_wc2 - new_b * (delta * delta).sum(axis=-1)
        logc = np.where(
            has, np.log(2.0 * np.pi * sst) - lam * new_logz - lam * sc / 2.0, 0.0
        )

        if total_w > 0:
            mu_fit = (s1_sum[None, :] - (s0[:, None, None] * delta).sum(axis=0)) / total_w
        else:
            mu_fit = np.broadcast_to(node.mu, (len(remaining), 2))

        # log density expanded as A0 + b*(2*p.m - |p|^2) with m = mu + delta,
        # so the candidate sweep is one GEMM plus in-place passes.
        mu_eff = mu_fit[None, :, :] + delta  # (n_img, R, 2)
        half_prec = 0.5 / sst
        a0 = (
            logc
            - (LOG_TWO_PI + np.log(sst))
            - (mu_eff * mu_eff).sum(axis=-1) * half_prec
        )
        scores = np.empty(len(remaining))
        for lo in range(0, len(remaining), chunk):
            hi = min(lo + chunk, len(remaining))
            if shared_pos:
                buf = (mu_eff[:, lo:hi] @ positions[0].T) * 2.0
            else:
                buf = 2.0 * np.einsum("iuk,irk->iru", positions, mu_eff[:, lo:hi])
            buf -= p_sq[:, None, :]
            buf *= half_prec[:, lo:hi, None]
            buf += a0[:, lo:hi, None]
            np.exp(buf, out=buf)
            buf *= prior
            buf += rest[:, None, :]
            np.log(buf, out=buf)
            buf *= mass[:, None, :]
            scores[lo:hi] = buf.sum(axis=(0, 2))

        best = int(np.argmax(scores))
        pick = remaining[best]
        selected.append(pick)
        remaining.pop(best)
        pd = cdet[:, pick]
        acc_b += pd * cw[pick]
        acc_cnt += pd
        acc_a += np.where(pd[:, None], cw[pick] * cdisp[:, pick], 0.0)
        acc_wc2 += pd * cw[pick] * (cdisp[:, pick] ** 2).sum(axis=-1)
        acc_logz += pd * (LOG_TWO_PI + math.log(cs2[pick]))

    return tuple(sorted(cands[s] for s in selected))
