"""Federated objectives with exact per-client gradients.

Two families are provided:

* :class:`QuadraticSuite` - ``F_i(w) = 1/2 (w - c_i)^T A_i (w - c_i)`` with
  closed-form minimiser, optimum and smoothness constant.
* :class:`LogisticSuite` - ridge-regularised multinomial logistic regression
  on client shards of a :class:`~aflsim.partition.Dataset`.

Stochastic gradients come from one of two noise models. ``gaussian_additive``
adds isotropic Gaussian noise with total variance ``sigma2`` to the exact
gradient, so the expectation over fresh samples equals the true gradient and
can be computed by substitution. ``minibatch`` (logistic only) samples a
uniform minibatch with replacement from the client shard.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from aflsim.kernels import batched_quadratic_grad, softmax_xent
from aflsim.partition import Dataset, Partition


@dataclass(frozen=True)
class NoiseSpec:
    sigma2: float = 0.0
    model: str = "gaussian_additive"  # or "minibatch"
    batch_size: int = 32


class ObjectiveSpec:
    """Common surface of the objective families."""

    kind: str
    n: int
    d: int
    noise: NoiseSpec
    L: float
    F_star: float
    w_star: Optional[np.ndarray] = None
    G_bound: Optional[float] = None

    # subclasses implement value/true_gradient/_batched_true_gradients

    def value(self, i: int, w: np.ndarray) -> float:
        raise NotImplementedError

    def true_gradient(self, i: int, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def true_gradients_at(self, W: np.ndarray) -> np.ndarray:
        """Row ``i`` is ``grad F_i(W[i])``."""
        return np.stack([self.true_gradient(i, W[i]) for i in range(self.n)])

    def client_gradients(self, w: np.ndarray) -> np.ndarray:
        """All client gradients at one shared point."""
        return self.true_gradients_at(np.broadcast_to(w, (self.n, self.d)))

    def global_objective_and_gradient(self, w: np.ndarray) -> Tuple[float, np.ndarray]:
        vals = [self.value(i, w) for i in range(self.n)]
        return float(np.mean(vals)), self.client_gradients(w).mean(axis=0)

    def zeta2_at(self, w: np.ndarray) -> float:
        G = self.client_gradients(w)
        return float(np.max(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))

    def stochastic_gradient(self, i: int, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.true_gradient(i, w)
        if self.noise.sigma2 == 0.0:
            return g
        return g + np.sqrt(self.noise.sigma2 / self.d) * rng.standard_normal(self.d)

    def stochastic_gradient_batch(self, i: int, w: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` independent stochastic gradients at ``w`` as rows."""
        if self.noise.model == "gaussian_additive":
            g = self.true_gradient(i, w)
            if self.noise.sigma2 == 0.0:
                return np.tile(g, (size, 1))
            return g + np.sqrt(self.noise.sigma2 / self.d) * rng.standard_normal((size, self.d))
        return np.stack([self.stochastic_gradient(i, w, rng) for _ in range(size)])

    def manifest(self, w0: Optional[np.ndarray] = None) -> dict:
        w0 = np.zeros(self.d) if w0 is None else w0
        return {
            "kind": self.kind,
            "n": self.n,
            "d": self.d,
            "sigma2": self.noise.sigma2,
            "noise_model": self.noise.model,
            "L": self.L,
            "zeta2_at_w0": self.zeta2_at(w0),
            "F_star": self.F_star,
        }


class QuadraticSuite(ObjectiveSpec):
    kind = "quadratic"

    def __init__(self, A: np.ndarray, centers: np.ndarray, noise: NoiseSpec, heterogeneity: float = 0.0):
        self.A = np.ascontiguousarray(A, dtype=np.float64)
        self.centers = np.ascontiguousarray(centers, dtype=np.float64)
        self.n, self.d = self.centers.shape
        self.noise = noise
        self.heterogeneity = float(heterogeneity)
        eig = np.linalg.eigvalsh(self.A)
        if eig.min() <= 0:
            raise RuntimeError("quadratic suite produced a non positive-definite A_i")
        self.L = float(eig.max())
        self.mu = float(eig.min())
        A_sum = self.A.sum(axis=0)
        b = np.einsum("nij,nj->i", self.A, self.centers)
        self.w_star = np.linalg.solve(A_sum, b)
        self.F_star = self.global_objective_and_gradient(self.w_star)[0]
        self.G_bound = None

    def value(self, i, w):
        r = w - self.centers[i]
        return 0.5 * float(r @ self.A[i] @ r)

    def true_gradient(self, i, w):
        return self.A[i] @ (w - self.centers[i])

    def true_gradients_at(self, W):
        return batched_quadratic_grad(self.A, self.centers, np.ascontiguousarray(W, dtype=np.float64))

    def global_objective_and_gradient(self, w):
        R = w - self.centers
        AR = np.einsum("nij,nj->ni", self.A, R)
        return float(0.5 * np.mean(np.sum(R * AR, axis=1))), AR.mean(axis=0)

    def manifest(self, w0=None):
        out = super().manifest(w0)
        out["heterogeneity_h"] = self.heterogeneity
        out["mu"] = self.mu
        return out


def _random_spd(d: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = rng.uniform(lo, hi, d)
    return (Q * lam) @ Q.T


def make_quadratic_suite(
    n: int,
    d: int,
    heterogeneity: float,
    condition: float,
    rng: np.random.Generator,
    noise: NoiseSpec = NoiseSpec(),
) -> QuadraticSuite:
    """Random quadratic clients with curvature spectra inside ``[1/condition, 1]``.

    ``heterogeneity`` (``h``) controls both how far client optima sit from
    the origin (``|c_i| = h``) and how far client curvatures are pulled from
    a shared base matrix (mixing weight ``h / (1 + h)``). ``h = 0`` gives
    identical clients.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if condition < 1:
        raise ValueError("condition must be >= 1")
    lo = 1.0 / condition
    base = _random_spd(d, lo, 1.0, rng)
    mix = heterogeneity / (1.0 + heterogeneity)
    A = np.empty((n, d, d))
    centers = np.empty((n, d))
    for i in range(n):
        B = _random_spd(d, lo, 1.0, rng)
        Ai = (1.0 - mix) * base + mix * B
        A[i] = 0.5 * (Ai + Ai.T)
        u = rng.standard_normal(d)
        centers[i] = heterogeneity * u / np.linalg.norm(u)
    return QuadraticSuite(A, centers, noise, heterogeneity)


class LogisticSuite(ObjectiveSpec):
    kind = "logistic"

    def __init__(self, dataset: Dataset, partition: Partition, ridge: float, noise: NoiseSpec = NoiseSpec()):
        if not ridge > 0:
            raise ValueError("ridge must be > 0")
        if any(s == 0 for s in partition.sizes()):
            raise ValueError("logistic suite needs every client shard to be non-empty")
        X = np.hstack([dataset.features, np.ones((dataset.size, 1))])
        self.X = np.ascontiguousarray(X)
        self.y = dataset.labels.astype(np.int64)
        self.C = dataset.n_classes
        self.p = self.X.shape[1]
        self.ridge = float(ridge)
        self.noise = noise
        self.shards = [np.asarray(a, dtype=np.int64) for a in partition.assignment]
        self.Xs = [np.ascontiguousarray(self.X[a]) for a in self.shards]
        self.ys = [self.y[a] for a in self.shards]
        self.weights = np.array([a.size for a in self.shards], dtype=np.float64)
        self.n = len(self.shards)
        self.d = self.p * self.C
        self._Xcat = np.vstack(self.Xs)
        self._ycat = np.concatenate(self.ys)
        self._vcat = np.concatenate([np.full(a.size, 1.0 / (self.n * a.size)) for a in self.shards])
        # softmax Jacobian has spectral norm <= 1/2
        self.L_clients = np.array(
            [0.5 * np.linalg.eigvalsh(Xi.T @ Xi / Xi.shape[0]).max() + self.ridge for Xi in self.Xs]
        )
        self.L = float(self.L_clients.max())
        self.G_bound = None
        self.w_star, self.F_star = self._solve()

    def _loss_grad(self, X, y, w):
        loss, G = softmax_xent(X, y, np.ascontiguousarray(w.reshape(self.p, self.C)))
        return loss + 0.5 * self.ridge * float(w @ w), G.ravel() + self.ridge * w

    def value(self, i, w):
        return self._loss_grad(self.Xs[i], self.ys[i], w)[0]

    def true_gradient(self, i, w):
        return self._loss_grad(self.Xs[i], self.ys[i], w)[1]

    def stochastic_gradient(self, i, w, rng):
        if self.noise.model == "minibatch":
            idx = rng.integers(0, self.shards[i].size, self.noise.batch_size)
            return self._loss_grad(self.Xs[i][idx], self.ys[i][idx], w)[1]
        return super().stochastic_gradient(i, w, rng)

    def global_objective_and_gradient(self, w):
        # unweighted mean over clients of per-shard means, done in one pass
        Wm = w.reshape(self.p, self.C)
        logits = self._Xcat @ Wm
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        z = expl.sum(axis=1)
        rows = np.arange(self._ycat.size)
        loss = float(self._vcat @ (np.log(z) - logits[rows, self._ycat]))
        P = expl / z[:, None]
        P[rows, self._ycat] -= 1.0
        grad = (self._Xcat.T @ (P * self._vcat[:, None])).ravel()
        return loss + 0.5 * self.ridge * float(w @ w), grad + self.ridge * w

    def _hessian(self, w):
        # F is an unweighted mean over clients of per-shard means
        Wm = w.reshape(self.p, self.C)
        H = np.zeros((self.d, self.d))
        for Xi in self.Xs:
            logits = Xi @ Wm
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            # sum_j kron(x_j x_j^T, diag(p_j) - p_j p_j^T)
            XP = np.einsum("jk,jc->jkc", Xi, P).reshape(Xi.shape[0], -1)
            diag_part = np.einsum("jk,jl,jc->kcl", Xi, Xi, P)
            Hi = -XP.T @ XP
            idx = np.arange(self.C)
            Hi4 = Hi.reshape(self.p, self.C, self.p, self.C)
            Hi4[:, idx, :, idx] += np.transpose(diag_part, (1, 0, 2))
            H += Hi / Xi.shape[0]
        return H / self.n + self.ridge * np.eye(self.d)

    def _solve(self, tol: float = 1e-10, max_iter: int = 100):
        w = np.zeros(self.d)
        f, g = self.global_objective_and_gradient(w)
        for _ in range(max_iter):
            if np.linalg.norm(g) <= tol:
                break
            step = np.linalg.solve(self._hessian(w), g)
            a = 1.0
            while True:
                w_new = w - a * step
                f_new, g_new = self.global_objective_and_gradient(w_new)
                if f_new <= f - 1e-4 * a * float(g @ step) or a < 1e-10:
                    break
                a *= 0.5
            w, f, g = w_new, f_new, g_new
        return w, f

    def accuracy(self, w) -> float:
        pred = np.argmax(self.X @ w.reshape(self.p, self.C), axis=1)
        return float(np.mean(pred == self.y))


def make_logistic_suite(dataset: Dataset, partition: Partition, ridge: float, noise: NoiseSpec = NoiseSpec()) -> LogisticSuite:
    return LogisticSuite(dataset, partition, ridge, noise)


def true_gradient(obj: ObjectiveSpec, i: int, w: np.ndarray) -> np.ndarray:
    return obj.true_gradient(i, w)


def stochastic_gradient(obj: ObjectiveSpec, i: int, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return obj.stochastic_gradient(i, w, rng)


def global_objective_and_gradient(obj: ObjectiveSpec, w: np.ndarray) -> Tuple[float, np.ndarray]:
    return obj.global_objective_and_gradient(w)
