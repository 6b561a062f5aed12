"""Shallow network evaluation and its closed-form derivative stack.

The one-hidden-layer ansatz with K outputs and an unbiased output layer is

    u_k(x) = sum_j alpha_kj * sigmoid(W_j . x + b_j),

so every spatial derivative and every parameter derivative is an explicit
sum over neurons; no automatic differentiation is involved anywhere.  The
flat parameter vector is laid out as alpha (row-major), then W (row-major),
then b.
"""

import json
from dataclasses import dataclass

import numpy as np


def sigmoid_stack(z):
    """sigmoid and its first three derivatives, stable for |z| up to ~700.

    Returns (s, s', s'', s''') with
        s'   = s (1 - s)
        s''  = s' (1 - 2 s)
        s''' = s' (1 - 6 s + 6 s^2)
    """
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(float)
    ez = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    s1 = s * (1.0 - s)
    s2 = s1 * (1.0 - 2.0 * s)
    s3 = s1 * (1.0 - 6.0 * s + 6.0 * s * s)
    return s, s1, s2, s3


@dataclass(frozen=True)
class ShallowNetParams:
    """Parameters of the one-hidden-layer network (output layer unbiased)."""

    alpha: np.ndarray   # (K, N)
    W: np.ndarray       # (N, d)
    b: np.ndarray       # (N,)

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_params(self) -> int:
        return self.alpha.size + self.W.size + self.b.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(), self.W.ravel(), self.b])

    @classmethod
    def from_vector(cls, p, N, d, K=1):
        p = np.asarray(p)
        ka = K * N
        alpha = p[:ka].reshape(K, N)
        W = p[ka:ka + N * d].reshape(N, d)
        b = p[ka + N * d:ka + N * d + N]
        return cls(alpha, W, b)

    def like(self, p):
        """Re-shape a flat vector using this container's dimensions."""
        return ShallowNetParams.from_vector(p, self.N, self.d, self.K)


@dataclass(frozen=True)
class TwoLayerNetParams:
    """Two-hidden-layer variant, N neurons per layer, unbiased output."""

    alpha: np.ndarray   # (K, N)
    W2: np.ndarray      # (N, N)
    b2: np.ndarray      # (N,)
    W1: np.ndarray      # (N, d)
    b1: np.ndarray      # (N,)

    @property
    def N(self) -> int:
        return self.W1.shape[0]

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_params(self) -> int:
        return (self.alpha.size + self.W2.size + self.b2.size
                + self.W1.size + self.b1.size)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(), self.W2.ravel(), self.b2,
                               self.W1.ravel(), self.b1])

    @classmethod
    def from_vector(cls, p, N, d, K=1):
        p = np.asarray(p)
        o = 0
        alpha = p[o:o + K * N].reshape(K, N); o += K * N
        W2 = p[o:o + N * N].reshape(N, N); o += N * N
        b2 = p[o:o + N]; o += N
        W1 = p[o:o + N * d].reshape(N, d); o += N * d
        b1 = p[o:o + N]
        return cls(alpha, W2, b2, W1, b1)

    def like(self, p):
        return TwoLayerNetParams.from_vector(p, self.N, self.d, self.K)


@dataclass(frozen=True)
class DerivativeBundle:
    """Network value, input derivatives, and their parameter Jacobians."""

    u: np.ndarray          # (K,)
    grad: np.ndarray       # (K, d)
    hess: np.ndarray       # (K, d, d)
    du_dp: np.ndarray      # (K, Np)
    dgrad_dp: np.ndarray   # (K, d, Np)
    dhess_dp: np.ndarray   # (K, d, d, Np)


def init_params(N, d=3, K=1, seed=0) -> ShallowNetParams:
    """I.i.d. uniform [-1, 1] initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(-1.0, 1.0, size=(K, N))
    W = rng.uniform(-1.0, 1.0, size=(N, d))
    b = rng.uniform(-1.0, 1.0, size=N)
    return ShallowNetParams(alpha, W, b)


def init_two_layer_params(N, d=3, K=1, seed=0) -> TwoLayerNetParams:
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(-1.0, 1.0, size=(K, N))
    W2 = rng.uniform(-1.0, 1.0, size=(N, N))
    b2 = rng.uniform(-1.0, 1.0, size=N)
    W1 = rng.uniform(-1.0, 1.0, size=(N, d))
    b1 = rng.uniform(-1.0, 1.0, size=N)
    return TwoLayerNetParams(alpha, W2, b2, W1, b1)


def evaluate(params: ShallowNetParams, X) -> np.ndarray:
    """Network values at points X of shape (M, d); returns (M, K)."""
    X = np.atleast_2d(X)
    s, _, _, _ = sigmoid_stack(X @ params.W.T + params.b)
    return s @ params.alpha.T


def evaluate_bundle(params: ShallowNetParams, x) -> DerivativeBundle:
    """Full derivative bundle of the shallow network at one point."""
    x = np.asarray(x, dtype=float)
    alpha, W, b = params.alpha, params.W, params.b
    K, N, d = params.K, params.N, params.d
    Np = params.n_params
    if x.shape != (d,):
        raise ValueError(f"expected point of dimension {d}, got shape {x.shape}")

    z = W @ x + b
    s0, s1, s2, s3 = sigmoid_stack(z)

    u = alpha @ s0
    grad = np.einsum("kj,j,ja->ka", alpha, s1, W)
    hess = np.einsum("kj,j,ja,jb->kab", alpha, s2, W, W)

    eyeK = np.eye(K)
    eyed = np.eye(d)

    # alpha block
    du_da = np.einsum("kl,j->klj", eyeK, s0).reshape(K, K * N)
    dg_da = np.einsum("kl,j,ja->kalj", eyeK, s1, W).reshape(K, d, K * N)
    dh_da = np.einsum("kl,j,ja,jb->kablj", eyeK, s2, W, W).reshape(K, d, d, K * N)

    # W block (indices j, c flattened row-major)
    du_dw = np.einsum("kj,j,c->kjc", alpha, s1, x).reshape(K, N * d)
    dg_dw = (
        np.einsum("kj,j,ja,c->kajc", alpha, s2, W, x)
        + np.einsum("kj,j,ac->kajc", alpha, s1, np.broadcast_to(eyed, (d, d)))
    ).reshape(K, d, N * d)
    dh_dw = (
        np.einsum("kj,j,c,ja,jb->kabjc", alpha, s3, x, W, W)
        + np.einsum("kj,j,ac,jb->kabjc", alpha, s2, eyed, W)
        + np.einsum("kj,j,bc,ja->kabjc", alpha, s2, eyed, W)
    ).reshape(K, d, d, N * d)

    # b block
    du_db = alpha * s1
    dg_db = np.einsum("kj,j,ja->kaj", alpha, s2, W)
    dh_db = np.einsum("kj,j,ja,jb->kabj", alpha, s3, W, W)

    du_dp = np.concatenate([du_da, du_dw, du_db], axis=-1)
    dgrad_dp = np.concatenate([dg_da, dg_dw, dg_db], axis=-1)
    dhess_dp = np.concatenate([dh_da, dh_dw, dh_db], axis=-1)
    assert du_dp.shape == (K, Np)
    return DerivativeBundle(u, grad, hess, du_dp, dgrad_dp, dhess_dp)


def evaluate_two_layer(params: TwoLayerNetParams, X) -> np.ndarray:
    X = np.atleast_2d(X)
    h, _, _, _ = sigmoid_stack(X @ params.W1.T + params.b1)
    g, _, _, _ = sigmoid_stack(h @ params.W2.T + params.b2)
    return g @ params.alpha.T


def evaluate_bundle_two_layer(params: TwoLayerNetParams, x) -> DerivativeBundle:
    """Derivative bundle of the two-hidden-layer network at one point."""
    x = np.asarray(x, dtype=float)
    alpha, W2, b2, W1, b1 = params.alpha, params.W2, params.b2, params.W1, params.b1
    K, N, d = params.K, params.N, params.d

    z1 = W1 @ x + b1
    h0, h1, h2, h3 = sigmoid_stack(z1)
    z2 = W2 @ h0 + b2
    g0, g1, g2, g3 = sigmoid_stack(z2)

    # spatial chain rule through both layers
    D = W2 @ (h1[:, None] * W1)                          # (N, d), dz2/dx
    T = np.einsum("ji,i,ia,ib->jab", W2, h2, W1, W1)     # (N, d, d), d2z2/dx2

    u = alpha @ g0
    grad = np.einsum("kj,j,ja->ka", alpha, g1, D)
    hess = (np.einsum("kj,j,ja,jb->kab", alpha, g2, D, D)
            + np.einsum("kj,j,jab->kab", alpha, g1, T))

    eyeK = np.eye(K)
    eyed = np.eye(d)

    # alpha block
    du_da = np.einsum("kl,j->klj", eyeK, g0).reshape(K, K * N)
    dg_da = np.einsum("kl,j,ja->kalj", eyeK, g1, D).reshape(K, d, K * N)
    dh_da = np.einsum(
        "kl,jab->kablj", eyeK, g2[:, None, None] * D[:, :, None] * D[:, None, :]
        + g1[:, None, None] * T,
    ).reshape(K, d, d, K * N)

    # W2 block (j, i row-major)
    du_dw2 = np.einsum("kj,j,i->kji", alpha, g1, h0).reshape(K, N * N)
    dg_dw2 = (
        np.einsum("kj,j,i,ja->kaji", alpha, g2, h0, D)
        + np.einsum("kj,j,i,ia->kaji", alpha, g1, h1, W1)
    ).reshape(K, d, N * N)
    dh_dw2 = (
        np.einsum("kj,j,i,ja,jb->kabji", alpha, g3, h0, D, D)
        + np.einsum("kj,j,i,ia,jb->kabji", alpha, g2, h1, W1, D)
        + np.einsum("kj,j,i,ib,ja->kabji", alpha, g2, h1, W1, D)
        + np.einsum("kj,j,i,jab->kabji", alpha, g2, h0, T)
        + np.einsum("kj,j,i,ia,ib->kabji", alpha, g1, h2, W1, W1)
    ).reshape(K, d, d, N * N)

    # b2 block
    du_db2 = alpha * g1
    dg_db2 = np.einsum("kj,j,ja->kaj", alpha, g2, D)
    dh_db2 = (np.einsum("kj,j,ja,jb->kabj", alpha, g3, D, D)
              + np.einsum("kj,j,jab->kabj", alpha, g2, T))

    # W1 block (m, c row-major); zeta_jm = dz2_j / dz1_m = W2_jm h1_m
    zeta = W2 * h1
    du_dw1 = np.einsum("kj,j,jm,c->kmc", alpha, g1, zeta, x).reshape(K, N * d)
    # dD_ja/dW1_mc = W2_jm (h2_m x_c W1_ma + h1_m delta_ac)
    dg_dw1 = (
        np.einsum("kj,j,jm,c,ja->kamc", alpha, g2, zeta, x, D)
        + np.einsum("kj,j,jm,m,c,ma->kamc", alpha, g1, W2, h2, x, W1)
        + np.einsum("kj,j,jm,m,ac->kamc", alpha, g1, W2, h1,
                    np.broadcast_to(eyed, (d, d)))
    ).reshape(K, d, N * d)
    # dT_jab/dW1_mc = W2_jm (h3_m x_c W1_ma W1_mb + h2_m (delta_ac W1_mb + delta_bc W1_ma))
    dh_dw1 = (
        np.einsum("kj,j,jm,c,ja,jb->kabmc", alpha, g3, zeta, x, D, D)
        + np.einsum("kj,j,jm,m,c,ma,jb->kabmc", alpha, g2, W2, h2, x, W1, D)
        + np.einsum("kj,j,jm,m,ac,jb->kabmc", alpha, g2, W2, h1, eyed, D)
        + np.einsum("kj,j,jm,m,c,mb,ja->kabmc", alpha, g2, W2, h2, x, W1, D)
        + np.einsum("kj,j,jm,m,bc,ja->kabmc", alpha, g2, W2, h1, eyed, D)
        + np.einsum("kj,j,jm,c,jab->kabmc", alpha, g2, zeta, x, T)
        + np.einsum("kj,j,jm,m,c,ma,mb->kabmc", alpha, g1, W2, h3, x, W1, W1)
        + np.einsum("kj,j,jm,m,ac,mb->kabmc", alpha, g1, W2, h2, eyed, W1)
        + np.einsum("kj,j,jm,m,bc,ma->kabmc", alpha, g1, W2, h2, eyed, W1)
    ).reshape(K, d, d, N * d)

    # b1 block: same chains with x_c -> 1 and the delta_ac terms dropped
    du_db1 = np.einsum("kj,j,jm->km", alpha, g1, zeta)
    dg_db1 = (
        np.einsum("kj,j,jm,ja->kam", alpha, g2, zeta, D)
        + np.einsum("kj,j,jm,m,ma->kam", alpha, g1, W2, h2, W1)
    )
    dh_db1 = (
        np.einsum("kj,j,jm,ja,jb->kabm", alpha, g3, zeta, D, D)
        + np.einsum("kj,j,jm,m,ma,jb->kabm", alpha, g2, W2, h2, W1, D)
        + np.einsum("kj,j,jm,m,mb,ja->kabm", alpha, g2, W2, h2, W1, D)
        + np.einsum("kj,j,jm,jab->kabm", alpha, g2, zeta, T)
        + np.einsum("kj,j,jm,m,ma,mb->kabm", alpha, g1, W2, h3, W1, W1)
    )

    du_dp = np.concatenate([du_da, du_dw2, du_db2, du_dw1, du_db1], axis=-1)
    dgrad_dp = np.concatenate([dg_da, dg_dw2, dg_db2, dg_dw1, dg_db1], axis=-1)
    dhess_dp = np.concatenate([dh_da, dh_dw2, dh_db2, dh_dw1, dh_db1], axis=-1)
    return DerivativeBundle(u, grad, hess, du_dp, dgrad_dp, dhess_dp)


# ---------------------------------------------------------------------------
# parameter snapshots
# ---------------------------------------------------------------------------

LAYOUT_VERSION = 1


def save_params(path, params: ShallowNetParams):
    """Write a parameter snapshot as JSON with a shape header."""
    payload = {
        "N": params.N,
        "d": params.d,
        "K": params.K,
        "layout_version": LAYOUT_VERSION,
        "data": params.to_vector().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_params(path) -> ShallowNetParams:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported layout_version {payload.get('layout_version')}")
    vec = np.asarray(payload["data"], dtype=float)
    return ShallowNetParams.from_vector(vec, payload["N"], payload["d"], payload["K"])
