# src/prop1_lab.py
"""
Quadratic bandits on which the safe-step claim for corrupted policy gradients
can be checked without estimation error.

Q(s, a) = -(a - T s)' M (a - T s) and the policy is a = Phi s + sigma * eps.
With S the second moment of the dataset states, the averaged gradient of an
affine field f(s, a) = F_a a + F_s s + f0 is (F_a Phi + F_s) S + f0 mean(s)',
and the advantage of Phi' over Phi is
    tr(M (Phi - T) S (Phi - T)') - tr(M (Phi' - T) S (Phi' - T)').
Parameter vectors are row-major flattenings of Phi.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import ortho_group

from .errors import StationaryInstanceError
from .utils import make_rng

logger = logging.getLogger(__name__)

DIRECTIONS = ('against', 'along', 'random')


@dataclass
class BanditConfig:
    n_s: int = 3
    n_a: int = 2
    n_states: int = 64
    sigma: float = 0.1
    alphas: tuple = (0.0, 0.25, 0.5)
    instances: int = 100
    n_mc: int = 10_000
    direction: str = 'against'
    scan_factor: float = 10.0
    seed: int = 0


@dataclass
class AffineField:
    """f(s, a) = F_a a + F_s s + f0, a candidate action-gradient field."""
    F_a: np.ndarray
    F_s: np.ndarray
    f0: np.ndarray

    def __call__(self, s, a):
        return np.asarray(a) @ self.F_a.T + np.asarray(s) @ self.F_s.T + self.f0

    @classmethod
    def zero(cls, n_s, n_a):
        return cls(np.zeros((n_a, n_a)), np.zeros((n_a, n_s)), np.zeros(n_a))


@dataclass
class BanditInstance:
    M: np.ndarray
    T: np.ndarray
    states: np.ndarray
    sigma: float
    phi0: np.ndarray
    instance_id: int = 0

    @property
    def n_s(self):
        return self.T.shape[1]

    @property
    def n_a(self):
        return self.T.shape[0]

    @property
    def second_moment(self):
        return self.states.T @ self.states / len(self.states)

    @property
    def mean_state(self):
        return self.states.mean(axis=0)

    @property
    def optimum(self):
        return self.T.copy()

    def q(self, s, a):
        u = np.asarray(a) - np.asarray(s) @ self.T.T
        return -np.einsum('...i,ij,...j->...', u, self.M, u)

    def grad_field(self):
        """The true action gradient -2 M (a - T s) as an affine field."""
        return AffineField(-2.0 * self.M, 2.0 * self.M @ self.T, np.zeros(self.n_a))

    # analytic smoothness constants
    @property
    def kappa_q(self):
        return 2.0 * np.linalg.norm(self.M, 2)

    @property
    def kappa_mu(self):
        return 0.0

    @property
    def sigma_mu(self):
        # d(Phi s)/d vec(Phi) = I kron s', whose spectral norm is ||s||
        return float(np.max(np.linalg.norm(self.states, axis=1)))

    def sigma_q(self, phi):
        """Bound on ||grad_a Q|| over dataset states and a 3-sigma noise ball."""
        drift = np.linalg.norm(self.states @ (phi - self.T).T, axis=1).max()
        return self.kappa_q * (drift + 3.0 * self.sigma * np.sqrt(self.n_a))


def make_instance(cfg, instance_id):
    rng = make_rng(cfg.seed, 61, instance_id)
    basis = ortho_group.rvs(cfg.n_a, random_state=rng) if cfg.n_a > 1 else np.ones((1, 1))
    M = basis @ np.diag(rng.uniform(1.0, 3.0, size=cfg.n_a)) @ basis.T
    M = 0.5 * (M + M.T)
    return BanditInstance(
        M=M,
        T=rng.standard_normal((cfg.n_a, cfg.n_s)),
        states=rng.uniform(-1.0, 1.0, size=(cfg.n_states, cfg.n_s)),
        sigma=cfg.sigma,
        phi0=rng.standard_normal((cfg.n_a, cfg.n_s)),
        instance_id=instance_id
    )


def _as_matrix(inst, phi):
    return np.asarray(phi, dtype=np.float64).reshape(inst.n_a, inst.n_s)


def closed_form_avg_gradient(inst, phi, field):
    phi = _as_matrix(inst, phi)
    return (field.F_a @ phi + field.F_s) @ inst.second_moment + np.outer(field.f0, inst.mean_state)


def avg_policy_gradient(inst, phi, f, n_samples=0, rng=None):
    """(Monte-Carlo estimate, closed form) of E_s E_eps [d mu/d phi' f(s, mu)] as flat vectors.

    Either entry is None when not computable: no samples requested, or f not affine.
    """
    phi = _as_matrix(inst, phi)
    closed = closed_form_avg_gradient(inst, phi, f).ravel() if isinstance(f, AffineField) else None
    mc = None
    if n_samples > 0:
        rng = rng if rng is not None else make_rng(0, 62)
        s = inst.states[rng.integers(0, len(inst.states), size=n_samples)]
        a = s @ phi.T + inst.sigma * rng.standard_normal((n_samples, inst.n_a))
        mc = (np.asarray(f(s, a)).T @ s / n_samples).ravel()
    return mc, closed


def eta_bound(alpha, kappa_q, kappa_mu, sigma_q, sigma_mu):
    """(eta_derivation, eta_stated) step-size ceilings for relative gradient error alpha.

    K = kappa_q sigma_mu + kappa_mu sigma_q;
    eta_derivation = 2 (1 - alpha) / (K^2 (1 + alpha)^2);
    eta_stated = (1 - alpha) / (k (1 + alpha)^2) with k = K / 2.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    K = kappa_q * sigma_mu + kappa_mu * sigma_q
    if K <= 0.0:
        raise ValueError("kappa_q * sigma_mu + kappa_mu * sigma_q must be positive")
    eta_derivation = 2.0 * (1.0 - alpha) / (K ** 2 * (1.0 + alpha) ** 2)
    eta_stated = (1.0 - alpha) / (0.5 * K * (1.0 + alpha) ** 2)
    return eta_derivation, eta_stated


def instance_eta_bound(inst, phi, alpha):
    return eta_bound(alpha, inst.kappa_q, inst.kappa_mu, inst.sigma_q(phi), inst.sigma_mu)


def corrupt_gradient(inst, phi, alpha, direction='against', rng=None):
    """(g, realized alpha): g = grad_a Q + e with ||avg(g) - avg(grad_a Q)|| = alpha ||avg(grad_a Q)||.

    e = E S^-1 s moves the averaged gradient by exactly E, chosen antiparallel
    ('against'), parallel ('along') or in a random direction.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    phi = _as_matrix(inst, phi)
    true_field = inst.grad_field()
    D = closed_form_avg_gradient(inst, phi, true_field)
    norm = np.linalg.norm(D)
    if norm <= 1e-12:
        raise StationaryInstanceError(
            f"instance {inst.instance_id}: averaged gradient vanishes, corruption undefined")
    if direction == 'against':
        E = -alpha * D
    elif direction == 'along':
        E = alpha * D
    else:
        rng = rng if rng is not None else make_rng(inst.instance_id, 63)
        R = rng.standard_normal(D.shape)
        E = alpha * norm * R / np.linalg.norm(R)
    shift = np.linalg.solve(inst.second_moment, E.T).T
    g = AffineField(true_field.F_a.copy(), true_field.F_s + shift, true_field.f0.copy())
    realized = np.linalg.norm(closed_form_avg_gradient(inst, phi, g) - D) / norm
    return g, float(realized)


def advantage_closed(inst, phi_new, phi_old):
    S = inst.second_moment

    def cost(phi):
        E = _as_matrix(inst, phi) - inst.T
        return np.trace(inst.M @ E @ S @ E.T)
    return float(cost(phi_old) - cost(phi_new))


def advantage_mc(inst, phi_new, phi_old, n_samples, rng):
    """Common-random-number Monte-Carlo estimate of the empirical advantage."""
    s = inst.states[rng.integers(0, len(inst.states), size=n_samples)]
    noise = inst.sigma * rng.standard_normal((n_samples, inst.n_a))
    q_new = inst.q(s, s @ _as_matrix(inst, phi_new).T + noise)
    q_old = inst.q(s, s @ _as_matrix(inst, phi_old).T + noise)
    return float(np.mean(q_new - q_old))


def verify_step(inst, phi, alpha, eta, g=None, direction='against', n_mc=0, rng=None):
    """Take phi' = phi + eta * avg(g) and return the empirical advantage of phi' over phi."""
    phi = _as_matrix(inst, phi)
    if g is None:
        g, _ = corrupt_gradient(inst, phi, alpha, direction, rng)
    eta_safe, _ = instance_eta_bound(inst, phi, alpha)
    if eta > eta_safe * (1.0 + 1e-12):
        logger.warning("instance %d: step %.4g exceeds the safe bound %.4g", inst.instance_id,
                       eta, eta_safe)
    phi_new = phi + eta * closed_form_avg_gradient(inst, phi, g)
    result = {'advantage_closed': advantage_closed(inst, phi_new, phi)}
    if n_mc > 0:
        rng = rng if rng is not None else make_rng(inst.instance_id, 64)
        result['advantage_mc'] = advantage_mc(inst, phi_new, phi, n_mc, rng)
    else:
        result['advantage_mc'] = float('nan')
    return result


def run_prop1(cfg):
    """(rows at the safe step, counterexample rows at scan_factor times the safe step)."""
    rows, counter = [], []
    for instance_id in range(cfg.instances):
        inst = make_instance(cfg, instance_id)
        phi = inst.phi0
        for alpha in cfg.alphas:
            rng = make_rng(cfg.seed, 65, instance_id, int(round(alpha * 1e6)))
            g, realized = corrupt_gradient(inst, phi, alpha, cfg.direction, rng)
            eta, _ = instance_eta_bound(inst, phi, alpha)
            result = verify_step(inst, phi, alpha, eta, g=g, n_mc=cfg.n_mc, rng=rng)
            rows.append({'instance_id': instance_id, 'alpha': alpha, 'eta': eta, **result})
            big = cfg.scan_factor * eta
            scanned = advantage_closed(inst, phi + big * closed_form_avg_gradient(inst, phi, g), phi)
            counter.append({'instance_id': instance_id, 'alpha': alpha, 'eta': big,
                            'realized_alpha': realized,
                            'advantage_closed': scanned, 'negative': scanned < 0.0})
    worst = min(r['advantage_closed'] for r in rows) if rows else float('nan')
    logger.info("prop1: %d rows, smallest safe-step advantage %.3g, %d counterexamples at %gx",
                len(rows), worst, sum(c['negative'] for c in counter), cfg.scan_factor)
    return rows, counter
