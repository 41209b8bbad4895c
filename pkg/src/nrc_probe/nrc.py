"""Layer-wise neural regression collapse metrics.

Four conditions are measured per layer of a trained regressor:

  nrc1  noise component: fraction of feature-covariance energy outside the
        top-k eigenspace; -> 0 when features are effectively rank k.
  nrc2  signal-target alignment: linear CKA between the features projected
        onto their top-k eigenspace and the targets; -> 1 when the feature
        covariance mirrors the target covariance.
  nrc3  feature-weight alignment: mean principal-angle cosine between the
        top-k feature eigenspace of the incoming activations and the top-k
        input subspace of the layer weights; -> 1 when the weights read
        exactly the directions the features occupy.
  nrc4  linear predictability: MSE of the minimum-norm linear map from the
        (centered) features to the (centered) targets; -> model MSE when the
        layer already carries everything the output needs.

Low-rank variants swap the target dimension t for the intrinsic target rank
r and additionally measure how much weight mass points at the noise
complement of the feature subspace.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .linalg import (
    DEFAULT_RCOND,
    OrthonormalBasis,
    ZeroVarianceError,
    _fix_signs,
    _truncated_pinv_solve,
    center_columns,
    ensure_matrix,
    linear_cka,
    principal_angle_cosines,
    stable_rank,
    top_input_subspace,
)

log = logging.getLogger(__name__)

EIGEN_TIE_RTOL = 1e-10
NRC3_MODES = ("incoming", "same_layer")


@dataclass(frozen=True)
class LayerMetrics:
    """Collapse conditions for one hidden layer. None marks a value that is
    undefined there (nrc3 at layer 1, nrc2/stable ranks on zero-variance
    features)."""

    layer_index: int
    nrc1_noise: float
    nrc2_cka: float | None
    nrc3_alignment: float | None
    nrc4_mse: float
    stable_rank_H: float | None
    stable_rank_W: float
    eigen_tie_flag: bool
    degenerate: bool = False


@dataclass(frozen=True)
class CollapseReport:
    layers: tuple[LayerMetrics, ...]
    model_train_mse: float
    target_stable_rank: float
    first_collapsed_layer: int | None
    subspace_dim: int
    epoch: int
    tau: float
    nrc3_mode: str = "incoming"
    output_nrc3: float | None = None
    output_stable_rank_w: float | None = None


@dataclass(frozen=True)
class Prop1Certificate:
    """Bound check: relative projection error onto the target column space
    against sqrt(eps1) + sqrt(eps2).

    energy_spread = sigma_k / sigma_1 of the projected features diagnoses the
    even-energy assumption the bound rests on; values well below 1 mean the
    certificate may legitimately fail to hold.
    """

    epsilon1: float
    epsilon2: float
    lhs: float
    bound: float
    holds: bool
    energy_spread: float


@dataclass(frozen=True)
class LowRankMetrics:
    layer_index: int
    rank_r_noise: float
    signal_alignment: float | None
    noise_alignment: float | None
    stable_rank_H: float | None


def _centered_spectrum(h) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Center H and return (H_c, left, singular values, right) of its thin SVD."""
    h_c = center_columns(h)
    u, s, vh = np.linalg.svd(h_c, full_matrices=False)
    return h_c, u, s, vh.T


def _noise_fraction(s: np.ndarray, k: int) -> float:
    total = float((s**2).sum())
    if total == 0.0:
        return 0.0
    return max(0.0, 1.0 - float((s[:k] ** 2).sum()) / total)


def _tie_flag(s: np.ndarray, k: int) -> bool:
    """Eigenvalue tie at the cut: sigma_k^2 - sigma_{k+1}^2 < tol * sigma_1^2."""
    if k >= s.size or s[0] == 0.0:
        return False
    lam = s**2
    return bool(lam[k - 1] - lam[k] < EIGEN_TIE_RTOL * lam[0])


def nrc1_noise_component(h, k: int) -> float:
    """Fraction of feature-covariance trace outside the top-k eigenspace.

    Computed from the singular values of the centered features:
    1 - sum(s_1..s_k ^2) / sum(s^2), identical to the covariance trace ratio.
    A zero-variance layer reports 0 (degenerate, logged).
    """
    h = ensure_matrix(h, "H")
    if h.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if not 1 <= k <= h.shape[1]:
        raise ValueError(f"k={k} out of range for {h.shape[1]} columns")
    _, _, s, _ = _centered_spectrum(h)
    if s[0] == 0.0:
        log.warning("nrc1: zero-variance features, reporting 0")
    return _noise_fraction(s, k)


def nrc2_cka(h, k: int, y) -> float:
    """Linear CKA between the top-k projected features and the targets."""
    h = ensure_matrix(h, "H")
    y = ensure_matrix(y, "Y")
    if h.shape[0] != y.shape[0]:
        raise ValueError("H and Y row counts differ")
    if not 1 <= k <= h.shape[1]:
        raise ValueError(f"k={k} out of range for {h.shape[1]} columns")
    h_c, _, s, v = _centered_spectrum(h)
    u = _fix_signs(v[:, :k])
    h_sig = (h_c @ u) @ u.T
    return linear_cka(h_sig, y)


def nrc3_alignment(h_prev, w, k: int) -> float:
    """Mean principal-angle cosine between the top-k eigenspace of the
    incoming features and the top-k input subspace of the weights."""
    h_prev = ensure_matrix(h_prev, "H_prev")
    w = ensure_matrix(w, "W")
    if h_prev.shape[1] != w.shape[1]:
        raise ValueError(f"feature dim {h_prev.shape[1]} does not match "
                         f"weight input dim {w.shape[1]}")
    if not 1 <= k <= min(h_prev.shape[1], *w.shape):
        raise ValueError(f"k={k} out of range")
    _, _, s, v = _centered_spectrum(h_prev)
    u_h = OrthonormalBasis(_fix_signs(v[:, :k]))
    v_w = top_input_subspace(w, k)
    return float(principal_angle_cosines(u_h, v_w).mean())


def nrc4_linear_mse(h, y, centered: bool = True, rcond: float = DEFAULT_RCOND) -> float:
    """(1/N) || H B - Y ||_F^2 for the pseudo-inverse solution B = H^+ Y.

    With centered=True (default) both H and Y are column-centered first,
    which is equivalent to fitting an intercept and makes the value
    comparable to the MSE of a network with bias terms.
    """
    h = ensure_matrix(h, "H")
    y = ensure_matrix(y, "Y")
    if h.shape[0] != y.shape[0]:
        raise ValueError("H and Y row counts differ")
    n = h.shape[0]
    if centered:
        h = center_columns(h)
        y = center_columns(y)
    if not h.any():
        log.warning("nrc4: zero features, only the mean is predictable")
        return float((y * y).sum() / n)
    u, s, vh = np.linalg.svd(h, full_matrices=False)
    b = _truncated_pinv_solve(u, s, vh.T, y, rcond)
    resid = h @ b - y
    return float((resid * resid).sum() / n)


def lowrank_noise_component(h, r: int) -> float:
    """nrc1 measured at the intrinsic target rank r instead of t."""
    return nrc1_noise_component(h, r)


def signal_noise_weight_alignment(h_prev, w, r: int) -> tuple[float, float]:
    """Alignment of the top-r weight input subspace with (a) the top-r feature
    eigenspace and (b) its orthogonal complement.

    A collapsed layer reads the signal subspace and ignores the complement:
    signal -> 1, noise -> 0.
    """
    h_prev = ensure_matrix(h_prev, "H_prev")
    w = ensure_matrix(w, "W")
    h_dim = h_prev.shape[1]
    if h_dim != w.shape[1]:
        raise ValueError("feature dim does not match weight input dim")
    if not 1 <= r < h_dim or r > min(w.shape):
        raise ValueError(f"r={r} out of range for feature dim {h_dim}, weights {w.shape}")
    _, _, s, v = _centered_spectrum(h_prev)
    u_r = _fix_signs(v[:, :r])
    q = np.linalg.qr(u_r, mode="complete")[0]
    complement = q[:, r:]
    v_w = top_input_subspace(w, r)
    signal = float(principal_angle_cosines(OrthonormalBasis(u_r), v_w).mean())
    noise = float(principal_angle_cosines(OrthonormalBasis(complement), v_w).mean())
    return signal, noise


def detect_first_collapsed(nrc1_values, tau: float) -> int | None:
    """Smallest 1-based layer index from which every deeper layer has
    nrc1 < tau; None when no suffix qualifies."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    first = None
    for i in range(len(nrc1_values) - 1, -1, -1):
        if nrc1_values[i] < tau:
            first = i + 1
        else:
            break
    return first


def proposition1_certificate(h, y, k: int) -> Prop1Certificate:
    """Certificate that noise suppression plus signal-target alignment bound
    the relative error of projecting the features onto the target columns.

    eps1 is the nrc1 noise fraction (so ||H_noise||_F / ||H||_F = sqrt(eps1)
    exactly), eps2 = 1 - nrc2, and the certified inequality is
    lhs <= sqrt(eps1) + sqrt(eps2), valid when the projected features spread
    their energy evenly across singular directions (energy_spread near 1).
    """
    h = ensure_matrix(h, "H")
    y = ensure_matrix(y, "Y")
    if h.shape[0] != y.shape[0]:
        raise ValueError("H and Y row counts differ")
    if not 1 <= k <= h.shape[1]:
        raise ValueError(f"k={k} out of range")
    h_c, _, s, v = _centered_spectrum(h)
    if s[0] == 0.0:
        raise ZeroVarianceError("certificate undefined for zero-variance features")
    y_c = center_columns(y)
    uy, sy, _ = np.linalg.svd(y_c, full_matrices=False)
    rank_y = int((sy > 1e-12 * sy[0]).sum()) if sy[0] > 0 else 0
    if rank_y == 0:
        raise ZeroVarianceError("certificate undefined for zero-variance targets")
    qy = uy[:, :rank_y]

    eps1 = _noise_fraction(s, k)
    eps2 = max(0.0, 1.0 - nrc2_cka(h, k, y))
    h_norm = float(np.linalg.norm(h_c))
    resid = h_c - qy @ (qy.T @ h_c)
    lhs = float(np.linalg.norm(resid)) / h_norm
    bound = math.sqrt(eps1) + math.sqrt(eps2)
    spread = float(s[k - 1] / s[0])
    return Prop1Certificate(
        epsilon1=eps1, epsilon2=eps2, lhs=lhs, bound=bound,
        holds=bool(lhs <= bound + 1e-9), energy_spread=spread,
    )


def ufm_solution(w, y, z) -> np.ndarray:
    """Zero-weight-decay minimizer family of the unconstrained features model.

    Column convention here: W is t x h, Y is t x N, Z is h x N, and the
    returned features are H = W^+ Y + (I - W^+ W) Z (h x N). Every member
    satisfies W H = Y exactly when W has full row rank, yet its alignment
    with W is arbitrary: weight decay, not loss minimization, is what forces
    feature-weight alignment.
    """
    w = ensure_matrix(w, "W")
    y = ensure_matrix(y, "Y")
    z = ensure_matrix(z, "Z")
    t, h_dim = w.shape
    if y.shape[0] != t:
        raise ValueError(f"Y must have {t} rows to chain with W, got {y.shape[0]}")
    if z.shape != (h_dim, y.shape[1]):
        raise ValueError(f"Z must be {h_dim} x {y.shape[1]}, got {z.shape}")
    u, s, vh = np.linalg.svd(w, full_matrices=False)
    w_pinv = _truncated_pinv_solve(u, s, vh.T, np.eye(t), DEFAULT_RCOND)
    return w_pinv @ y + (np.eye(h_dim) - w_pinv @ w) @ z


def full_report(trace, params, y, k: int, tau: float, model_train_mse: float,
                nrc3_mode: str = "incoming", include_input_nrc3: bool = False,
                center_nrc4: bool = True, rcond: float = DEFAULT_RCOND,
                epoch: int = 0) -> CollapseReport:
    """All collapse conditions for every hidden layer of one forward trace.

    Each layer's centered SVD is computed once and shared by nrc1, nrc2,
    nrc4, the stable rank, and the tie flag; results are bit-identical to
    calling the standalone metric functions.

    nrc3 conventions: "incoming" scores layer l by angle(H^{l-1}, W^l)
    (undefined at l=1 unless include_input_nrc3 uses H^0 = X) and reports
    the output weight as output_nrc3 = angle(H^{L-1}, W^L); "same_layer"
    scores layer l by angle(H^l, W^{l+1}).
    """
    if nrc3_mode not in NRC3_MODES:
        raise ValueError(f"unknown nrc3_mode {nrc3_mode!r}")
    y = ensure_matrix(y, "Y")
    n = y.shape[0]
    hidden = trace.hidden
    if not hidden:
        raise ValueError("trace has no hidden layers to measure")
    if trace.inputs.shape[0] != n:
        raise ValueError("trace and targets disagree on sample count")

    y_c = center_columns(y)
    if not y_c.any():
        raise ZeroVarianceError("targets have zero variance")
    target_sr = stable_rank(y_c)

    # Per-matrix cache over [X, H^1, ..., H^{L-1}]: (singular values, top-k basis).
    mats = [trace.inputs] + list(hidden)
    cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}

    def spectrum(idx: int):
        if idx not in cache:
            cache[idx] = _centered_spectrum(mats[idx])
        return cache[idx]

    def topk_basis(idx: int) -> OrthonormalBasis | None:
        _, _, s, v = spectrum(idx)
        if s[0] == 0.0 or v.shape[1] < k:
            return None
        return OrthonormalBasis(_fix_signs(v[:, :k]))

    rows: list[LayerMetrics] = []
    for li, h in enumerate(hidden, start=1):
        h_c, u_left, s, v = spectrum(li)
        w = params.weights[li - 1]
        degenerate = s[0] == 0.0
        nrc1 = _noise_fraction(s, k) if not degenerate else 0.0
        tie = _tie_flag(s, k)

        nrc2: float | None
        if degenerate:
            log.warning("layer %d: zero-variance features, nrc2 undefined", li)
            nrc2 = None
        else:
            u_k = _fix_signs(v[:, :k])
            h_sig = (h_c @ u_k) @ u_k.T
            try:
                nrc2 = linear_cka(h_sig, y)
            except ZeroVarianceError:
                log.warning("layer %d: degenerate projected features, nrc2 undefined", li)
                nrc2 = None

        if not center_nrc4:
            nrc4 = nrc4_linear_mse(h, y, centered=False, rcond=rcond)
        elif degenerate:
            nrc4 = float((y_c * y_c).sum() / n)
        else:
            b = _truncated_pinv_solve(u_left, s, v, y_c, rcond)
            resid = h_c @ b - y_c
            nrc4 = float((resid * resid).sum() / n)

        nrc3: float | None = None
        if nrc3_mode == "incoming":
            prev_idx = li - 1
            if prev_idx > 0 or include_input_nrc3:
                u_prev = topk_basis(prev_idx)
                if u_prev is not None and k <= min(w.shape):
                    nrc3 = float(principal_angle_cosines(
                        u_prev, top_input_subspace(w, k)).mean())
        else:
            if li < len(params.weights):
                w_next = params.weights[li]
                u_here = topk_basis(li)
                if u_here is not None and k <= min(w_next.shape):
                    nrc3 = float(principal_angle_cosines(
                        u_here, top_input_subspace(w_next, k)).mean())

        sr_h = float((s**2).sum() / s[0] ** 2) if not degenerate else None
        rows.append(LayerMetrics(
            layer_index=li, nrc1_noise=nrc1, nrc2_cka=nrc2, nrc3_alignment=nrc3,
            nrc4_mse=nrc4, stable_rank_H=sr_h, stable_rank_W=stable_rank(w),
            eigen_tie_flag=tie, degenerate=degenerate,
        ))

    output_nrc3 = None
    output_sr_w = stable_rank(params.weights[-1])
    if nrc3_mode == "incoming":
        w_out = params.weights[-1]
        u_last = topk_basis(len(mats) - 1)
        if u_last is not None and k <= min(w_out.shape):
            output_nrc3 = float(principal_angle_cosines(
                u_last, top_input_subspace(w_out, k)).mean())

    first = detect_first_collapsed([r.nrc1_noise for r in rows], tau)
    return CollapseReport(
        layers=tuple(rows), model_train_mse=model_train_mse,
        target_stable_rank=target_sr, first_collapsed_layer=first,
        subspace_dim=k, epoch=epoch, tau=tau, nrc3_mode=nrc3_mode,
        output_nrc3=output_nrc3, output_stable_rank_w=output_sr_w,
    )


def lowrank_report(trace, params, r: int, include_input: bool = False
                   ) -> list[LowRankMetrics]:
    """Intrinsic-rank diagnostics per hidden layer (see signal_noise_weight_alignment)."""
    hidden = trace.hidden
    mats = [trace.inputs] + list(hidden)
    rows = []
    for li, h in enumerate(hidden, start=1):
        h_c = center_columns(h)
        s = np.linalg.svd(h_c, compute_uv=False)
        degenerate = s[0] == 0.0
        noise_r = _noise_fraction(s, r) if not degenerate else 0.0
        sr_h = float((s**2).sum() / s[0] ** 2) if not degenerate else None
        signal = noise = None
        prev = mats[li - 1]
        w = params.weights[li - 1]
        if (li > 1 or include_input) and r < prev.shape[1] and r <= min(w.shape):
            try:
                signal, noise = signal_noise_weight_alignment(prev, w, r)
            except ValueError:
                pass
        rows.append(LowRankMetrics(
            layer_index=li, rank_r_noise=noise_r, signal_alignment=signal,
            noise_alignment=noise, stable_rank_H=sr_h,
        ))
    return rows
