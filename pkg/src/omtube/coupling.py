"""Coupling of the radial reference process with a flat Brownian motion.

Both processes are driven by one n-dimensional Brownian motion W with
n = 1 + d(d-1)/2, through the isometries J^i built by ``build_J``:

    dY = sigma(t, Y) <J U, dW> + c(t, Y) dt,      U = Y/|Y|,
    dYt =            <J Ut, dW>,                  Ut = Yt/|Yt|,

where <J u, w> is the d-vector with components <J^i u, w>.  Property (c)
of the J construction makes <U, dB> = <Ut, dBt> = <e0, dW> exactly, so the
radial parts coincide pathwise in continuous time; the discrete gap is a
measured diagnostic.  Alongside the pair the integrator tracks Levy areas,
the inner-product process <U, Ut> with its closed-form SDE coefficients
H and G, the compensated exponential bookkeeping (Delta, nu), and the
area-integral martingale M_p.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _rng
from .errors import ChartDomainError, ConstructionError, InsufficientSamplesError

__all__ = [
    "JMaps",
    "build_J",
    "CoupledState",
    "coupled_step",
    "levy_area_update",
    "H_of",
    "G_of",
    "omega_matrix",
    "inner_product_sde_step",
    "CoupledEnsemble",
    "simulate_coupled_ensemble",
    "martingale_Mp",
    "delta_tail_estimate",
    "stokes_consistency",
    "write_diagnostics_csv",
]


# ---------------------------------------------------------------------------
# the linear-algebra lemma
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JMaps:
    """The d isometries J^i : R^d -> R^n, n = 1 + d(d-1)/2.

    ``J[i]`` is the n x d matrix of J^i; basis vector 0 of R^n is the
    distinguished direction e0 with sum_i u^i J^i u = |u|^2 e0.
    """

    d: int
    n: int
    J: np.ndarray

    def apply(self, u, w=None):
        """<J u, w> as a d-vector batch; with w=None returns J^i u stacked.

        u: (..., d); w: (..., n).  Output (..., d) resp. (..., d, n).
        """
        Ju = np.einsum("iab,...b->...ia", self.J, u)
        if w is None:
            return Ju
        return np.einsum("...ia,...a->...i", Ju, w)


def build_J(d):
    """Explicit construction: J^i e_a = e_{ia} (i<a), e0 (i=a), -e_{ai} (i>a)."""
    if d < 1:
        raise ConstructionError("dimension must be >= 1")
    n = 1 + d * (d - 1) // 2
    pair_index = {}
    nxt = 1
    for a in range(d):
        for b in range(a + 1, d):
            pair_index[(a, b)] = nxt
            nxt += 1
    J = np.zeros((d, n, d))
    for i in range(d):
        for a in range(d):
            if i < a:
                J[i, pair_index[(i, a)], a] = 1.0
            elif i == a:
                J[i, 0, a] = 1.0
            else:
                J[i, pair_index[(a, i)], a] = -1.0
    return JMaps(d=d, n=n, J=J)


# ---------------------------------------------------------------------------
# closed-form SDE coefficients of the inner product
# ---------------------------------------------------------------------------

def H_of(chart, t, R, U, U_tilde):
    """H = |(sigma(t, R U) - I)(U - Ut)| / R^2 (batched)."""
    R = np.asarray(R, dtype=float)
    y = R[..., None] * U
    dv = chart.sigma_apply(t, y, U - U_tilde) - (U - U_tilde)
    return np.linalg.norm(dv, axis=-1) / R ** 2


def G_of(chart, t, R, U):
    """G = tr((sigma(t, R U) - I)^2) / R^4 (batched)."""
    R = np.asarray(R, dtype=float)
    y = R[..., None] * U
    s = chart.sigma(t, y)
    dev = s - np.eye(chart.d)
    return np.einsum("...ij,...ji->...", dev, dev) / R ** 4


def omega_matrix(U, U_tilde):
    """omega = U (x) Ut - Ut (x) U + <U, Ut> I, satisfying omega Ut = U."""
    U = np.asarray(U, dtype=float)
    U_tilde = np.asarray(U_tilde, dtype=float)
    c = np.einsum("...i,...i->...", U, U_tilde)
    eye = np.eye(U.shape[-1])
    return (U[..., :, None] * U_tilde[..., None, :]
            - U_tilde[..., :, None] * U[..., None, :]
            + c[..., None, None] * eye)


def inner_product_sde_step(chart, t, R, U, U_tilde, uu, dW1, dt):
    """One Euler step of d<U,Ut> = R H dW1 - (1/2) R^2 G <U,Ut> dt."""
    H = H_of(chart, t, R, U, U_tilde)
    G = G_of(chart, t, R, U)
    return R * H * dW1 - 0.5 * R ** 2 * G * uu * dt


def levy_area_update(A, y_old, y_new):
    """Stratonovich midpoint increment of the area matrix.

    dA^ij = ybar^i dy^j - ybar^j dy^i with ybar the step midpoint; the
    running matrix stays exactly antisymmetric.
    """
    ybar = 0.5 * (y_old + y_new)
    dy = y_new - y_old
    inc = ybar[..., :, None] * dy[..., None, :] - dy[..., :, None] * ybar[..., None, :]
    return A + inc


# ---------------------------------------------------------------------------
# single-state step (reference implementation of the ensemble kernel)
# ---------------------------------------------------------------------------

@dataclass
class CoupledState:
    """Joint state of the coupled pair and its bookkeeping scalars."""

    t: float
    Y: np.ndarray
    Y_tilde: np.ndarray
    A: np.ndarray
    G_int: float = 0.0
    nu: float = 0.0
    M_ito: float = 0.0       # sum alpha_ij dA^ij (Ito, left point)
    M_bracket: float = 0.0   # sum (alpha_ij dA^ij)^2
    L: float = 0.0
    L_tilde: float = 0.0

    @property
    def R(self):
        return float(np.linalg.norm(self.Y))

    @property
    def R_tilde(self):
        return float(np.linalg.norm(self.Y_tilde))

    @property
    def U(self):
        return self.Y / self.R

    @property
    def U_tilde(self):
        return self.Y_tilde / self.R_tilde

    @property
    def uu(self):
        return float(self.U @ self.U_tilde)

    @property
    def Delta(self):
        return (1.0 - self.uu) * math.exp(0.5 * self.G_int)


def coupled_step(chart, state, dW, dt, jmaps=None, forms=None, dW1_fresh=0.0):
    """Advance one coupled state by one Euler step from the shared noise dW.

    Uses the identical arithmetic as the vectorized ensemble integrator;
    exposed for direct inspection and unit tests.  Returns the new state
    and the per-step extras (dB, dBt, dW0, dW1, H, G, ...).
    """
    j = jmaps or build_J(chart.d)
    out = _step_batch(chart, j, state.t,
                      state.Y[None, :], state.Y_tilde[None, :],
                      dW[None, :], dt, forms,
                      fresh_w1=np.atleast_1d(np.asarray(dW1_fresh, dtype=float)))
    new = CoupledState(
        t=state.t + dt,
        Y=out["Y"][0], Y_tilde=out["Yt"][0],
        A=levy_area_update(state.A, state.Y, out["Y"][0]),
        G_int=state.G_int + out["dG_int"][0],
        nu=state.nu + out["dnu"][0] * math.exp(state.G_int),
        M_ito=state.M_ito + out["dM_ito"][0],
        M_bracket=state.M_bracket + out["dM_bracket"][0],
        L=state.L + out["dL"][0],
        L_tilde=state.L_tilde + out["dLt"][0],
    )
    extras = {k: v[0] for k, v in out.items() if k.startswith("d") or k in ("w0_dev", "H", "G")}
    return new, extras


def _step_batch(chart, jmaps, t, Y, Yt, dW, dt, forms, fresh_w1=None):
    """Shared stepping arithmetic for a batch of coupled states.

    Y, Yt: (m, d); dW: (m, n), already scaled by sqrt(dt).  Returns the new
    states plus per-path increments of all bookkeeping accumulators
    (``dnu`` is returned without the exp(int R^2 G) factor, which the
    caller applies with its left-point running integral).
    """
    m, d = Y.shape
    R = np.linalg.norm(Y, axis=-1)
    Rt = np.linalg.norm(Yt, axis=-1)
    U = Y / R[:, None]
    Ut = Yt / Rt[:, None]

    dB = jmaps.apply(U, dW)
    dBt = jmaps.apply(Ut, dW)
    dW0 = dW[:, 0]
    w0_dev = np.maximum(np.abs(np.einsum("mi,mi->m", U, dB) - dW0),
                        np.abs(np.einsum("mi,mi->m", Ut, dBt) - dW0))

    sig_dB = chart.sigma_apply(t, Y, dB)
    Y_new = Y + sig_dB + chart.bessel_drift(t, Y) * dt
    Yt_new = Yt + dBt

    # inner-product SDE coefficients at the pre-step state
    sig_dU = chart.sigma_apply(t, Y, U - Ut) - (U - Ut)
    H = np.linalg.norm(sig_dU, axis=-1) / R ** 2
    G = G_of(chart, t, R, U)

    # W1 extraction: <(sigma - I) Ut, dB> / (R^2 H); on lanes where the
    # diffusion term degenerates a fresh independent increment stands in
    sig_Ut = chart.sigma_apply(t, Y, Ut) - Ut
    num = np.einsum("mi,mi->m", sig_Ut, dB)
    den = R ** 2 * H
    ok = den > 1e-14
    fallback = np.zeros(m) if fresh_w1 is None else fresh_w1
    dW1 = np.where(ok, num / np.where(ok, den, 1.0), fallback)

    dG_int = R ** 2 * G * dt
    dnu = R ** 2 * H ** 2 * dt

    out = {
        "Y": Y_new, "Yt": Yt_new, "R": R, "Rt": Rt, "U": U, "Ut": Ut,
        "dB": dB, "dBt": dBt, "dW0": dW0, "dW1": dW1, "H": H, "G": G,
        "w0_dev": w0_dev, "dG_int": dG_int, "dnu": dnu,
    }

    if forms is not None:
        K = forms.alpha_ij(t, Y)
        dA = _area_increment(Y, Y_new)
        kd = np.einsum("mij,mij->m", K, dA)
        out["dM_ito"] = kd
        out["dM_bracket"] = kd ** 2
        out["dL"] = forms.beta(t, U) * dt
        out["dLt"] = forms.beta(t, Ut) * dt
    else:
        z = np.zeros(m)
        out["dM_ito"] = z
        out["dM_bracket"] = z
        out["dL"] = z
        out["dLt"] = z
    return out


def _area_increment(y_old, y_new):
    ybar = 0.5 * (y_old + y_new)
    dy = y_new - y_old
    return ybar[..., :, None] * dy[..., None, :] - dy[..., :, None] * ybar[..., None, :]


# ---------------------------------------------------------------------------
# vectorized coupled ensembles
# ---------------------------------------------------------------------------

@dataclass
class CoupledEnsemble:
    """Per-path terminal records of a coupled simulation.

    Paths that exit the tube are frozen at their exit step; ``survived``
    marks the paths that stayed inside for the whole horizon.  All arrays
    have length n_paths.
    """

    n_paths: int
    delta: float
    dt: float
    T: float
    survived: np.ndarray
    exit_time: np.ndarray
    max_radial_gap: np.ndarray
    uu_final: np.ndarray
    sup_udiff: np.ndarray      # running max of |U - Ut|
    udiff_final: np.ndarray
    M_ito: np.ndarray
    M_bracket: np.ndarray
    L: np.ndarray
    L_tilde: np.ndarray
    G_int: np.ndarray
    nu: np.ndarray
    ortho_cov: np.ndarray      # sum_k dA^ij d|Y| for the lexicographically first pair
    h2_le_g_violations: int
    w0_identity_dev: float
    uu_pred_gap: np.ndarray    # direct <U,Ut> minus Lemma-uu Euler prediction at T/exit

    @property
    def n_survive(self):
        return int(np.count_nonzero(self.survived))

    def martingale_Mp(self, p):
        return martingale_Mp(self, p)


def martingale_Mp(records, p):
    """M_p(T) = p * Ito area integral - (p^2/2) * accumulated bracket."""
    return p * np.asarray(records.M_ito) - 0.5 * p * p * np.asarray(records.M_bracket)


def simulate_coupled_ensemble(chart, cfg, n_paths, forms=None, jmaps=None,
                              track_forms=None, chunk_range=None):
    """Run the coupled pair for an ensemble and collect diagnostics.

    ``forms`` (a :class:`~omtube.om.GirsanovForms`) switches on the
    bookkeeping of the area martingale and the beta integrals.  The pair is
    launched from one shared plain Gaussian step (sigma(0) = I, c(0) = 0),
    after which both spherical parts are defined and equal.
    """
    if cfg.delta is None:
        raise ConstructionError("coupled ensembles need a tube radius delta")
    if cfg.delta >= chart.tube_radius:
        raise ChartDomainError("tube delta must stay below the chart tube radius")
    if cfg.bridge_correction:
        raise ConstructionError("bridge correction is not used in coupled runs; "
                                "the bookkeeping needs exact grid states")
    T, n_steps = cfg.horizon(chart.curve)
    d = chart.d
    j = jmaps or build_J(d)
    sq = math.sqrt(cfg.dt)
    delta = cfg.delta
    chunks = list(_rng.iter_chunks(n_paths))
    if chunk_range is not None:
        chunks = [(jj, m) for (jj, m) in chunks if chunk_range[0] <= jj < chunk_range[1]]

    acc = {k: [] for k in ("survived", "exit_time", "max_radial_gap", "uu_final",
                           "sup_udiff", "udiff_final", "M_ito", "M_bracket", "L",
                           "L_tilde", "G_int", "nu", "ortho_cov", "uu_pred_gap")}
    h2_viol = 0
    w0_dev_max = 0.0

    for chunk_id, m in chunks:
        gen = _rng.chunk_generator(cfg.seed, chunk_id)

        # launch: one plain Gaussian step shared by both processes
        G0 = gen.standard_normal((m, d))
        Y = sq * G0
        Yt = Y.copy()
        r0 = np.linalg.norm(Y, axis=-1)
        degenerate = r0 < 1e-300

        # full-length per-path records, scattered into at exit / at the end
        exited = np.zeros(m, dtype=bool)
        tex = np.full(m, np.nan)
        maxgap_f = np.zeros(m)
        uu_f = np.ones(m)
        uup_f = np.ones(m)
        supdev_f = np.zeros(m)
        Mito_f = np.zeros(m)
        Mbrk_f = np.zeros(m)
        L_f = np.zeros(m)
        Lt_f = np.zeros(m)
        Gint_f = np.zeros(m)
        nu_f = np.zeros(m)
        ortho_f = np.zeros(m)

        live = ~degenerate & (r0 < delta)
        exited[~live & ~degenerate] = True
        tex[~live & ~degenerate] = cfg.dt
        lanes = np.nonzero(live)[0]
        Y, Yt = Y[lanes], Yt[lanes]
        # compacted running state
        maxgap = np.zeros(lanes.size)
        uu = np.ones(lanes.size)
        uu_pred = np.ones(lanes.size)
        supdev = np.zeros(lanes.size)
        M_ito = np.zeros(lanes.size)
        M_brk = np.zeros(lanes.size)
        Lacc = np.zeros(lanes.size)
        Ltacc = np.zeros(lanes.size)
        G_int = np.zeros(lanes.size)
        nu = np.zeros(lanes.size)
        ortho = np.zeros(lanes.size)

        def scatter(sel):
            ids = lanes[sel]
            maxgap_f[ids] = maxgap[sel]
            uu_f[ids] = uu[sel]
            uup_f[ids] = uu_pred[sel]
            supdev_f[ids] = supdev[sel]
            Mito_f[ids] = M_ito[sel]
            Mbrk_f[ids] = M_brk[sel]
            L_f[ids] = Lacc[sel]
            Lt_f[ids] = Ltacc[sel]
            Gint_f[ids] = G_int[sel]
            nu_f[ids] = nu[sel]
            ortho_f[ids] = ortho[sel]

        track = forms if track_forms is not False else None
        for k in range(1, n_steps):
            if lanes.size == 0:
                break  # later draws are never consumed
            dW = sq * gen.standard_normal((lanes.size, j.n))
            w1f = sq * gen.standard_normal(lanes.size)
            t = k * cfg.dt
            res = _step_batch(chart, j, t, Y, Yt, dW, cfg.dt, track, fresh_w1=w1f)
            w0_dev_max = max(w0_dev_max, float(np.max(res["w0_dev"], initial=0.0)))

            Rn = np.linalg.norm(res["Y"], axis=-1)
            Rtn = np.linalg.norm(res["Yt"], axis=-1)
            maxgap = np.maximum(maxgap, np.abs(Rn - Rtn))

            # H^2 <= G must hold pointwise; count violations with a tiny slack
            h2_viol += int(np.count_nonzero(
                res["H"] ** 2 > res["G"] * (1 + 1e-12) + 1e-30))

            uu_pred = (uu_pred + res["R"] * res["H"] * res["dW1"]
                       - 0.5 * res["R"] ** 2 * res["G"] * uu_pred * cfg.dt)
            nu = nu + res["dnu"] * np.exp(G_int)
            G_int = G_int + res["dG_int"]
            M_ito = M_ito + res["dM_ito"]
            M_brk = M_brk + res["dM_bracket"]
            Lacc = Lacc + res["dL"]
            Ltacc = Ltacc + res["dLt"]
            if d >= 2:
                dA01 = (0.5 * (Y[:, 0] + res["Y"][:, 0]) * (res["Y"][:, 1] - Y[:, 1])
                        - 0.5 * (Y[:, 1] + res["Y"][:, 1]) * (res["Y"][:, 0] - Y[:, 0]))
                ortho = ortho + dA01 * (Rn - res["R"])
            uu = np.einsum("mi,mi->m", res["Y"], res["Yt"]) / (Rn * Rtn)
            supdev = np.maximum(supdev,
                                np.sqrt(np.maximum(2.0 * (1.0 - uu), 0.0)))
            Y = res["Y"]
            Yt = res["Yt"]

            out = Rn >= delta
            if out.any():
                scatter(out)
                gone = lanes[out]
                exited[gone] = True
                tex[gone] = (k + 1) * cfg.dt
                keep = ~out
                lanes = lanes[keep]
                Y, Yt = Y[keep], Yt[keep]
                maxgap, uu, uu_pred, supdev = (maxgap[keep], uu[keep],
                                               uu_pred[keep], supdev[keep])
                M_ito, M_brk, Lacc, Ltacc = (M_ito[keep], M_brk[keep],
                                             Lacc[keep], Ltacc[keep])
                G_int, nu, ortho = G_int[keep], nu[keep], ortho[keep]

        scatter(np.ones(lanes.size, dtype=bool))
        acc["survived"].append(~exited & ~degenerate)
        acc["exit_time"].append(tex)
        acc["max_radial_gap"].append(maxgap_f)
        acc["uu_final"].append(uu_f)
        acc["sup_udiff"].append(supdev_f)
        acc["udiff_final"].append(np.sqrt(np.maximum(2 * (1 - uu_f), 0.0)))
        acc["M_ito"].append(Mito_f)
        acc["M_bracket"].append(Mbrk_f)
        acc["L"].append(L_f)
        acc["L_tilde"].append(Lt_f)
        acc["G_int"].append(Gint_f)
        acc["nu"].append(nu_f)
        acc["ortho_cov"].append(ortho_f)
        acc["uu_pred_gap"].append(uu_f - uup_f)

    cat = {k: np.concatenate(v) for k, v in acc.items()}
    return CoupledEnsemble(
        n_paths=int(cat["survived"].size), delta=delta, dt=cfg.dt, T=T,
        h2_le_g_violations=h2_viol, w0_identity_dev=w0_dev_max, **cat)


# ---------------------------------------------------------------------------
# tail of the spherical separation
# ---------------------------------------------------------------------------

def delta_tail_estimate(ensemble, lambdas=None):
    """Conditional tail of sup |U - Ut| / sqrt(delta) over surviving paths.

    Returns (lambdas, tail, K) where ``tail[i] = P[sup > lambda_i | tube]``
    and K is the least-squares fit of the Gaussian-bound template
    2 P[N(0,1) > K lambda^2] to the empirical tail.
    """
    from scipy import optimize, stats

    surv = ensemble.survived
    if np.count_nonzero(surv) < 100:
        raise InsufficientSamplesError(
            f"only {np.count_nonzero(surv)} surviving paths; need >= 100")
    scaled = ensemble.sup_udiff[surv] / math.sqrt(ensemble.delta)
    if lambdas is None:
        hi = max(float(np.quantile(scaled, 0.995)), 1e-6)
        lambdas = np.linspace(0.25 * hi, hi, 8)
    lambdas = np.asarray(lambdas, dtype=float)
    tail = np.array([np.mean(scaled > lam) for lam in lambdas])

    mask = (tail > 0) & (tail < 1)
    if mask.sum() >= 2:
        def loss(logK):
            model = 2.0 * stats.norm.sf(np.exp(logK) * lambdas[mask] ** 2)
            return np.sum((np.log(tail[mask]) - np.log(model)) ** 2)

        res = optimize.minimize_scalar(loss, bounds=(-10, 10), method="bounded")
        K = float(np.exp(res.x))
    else:
        K = float("nan")
    return lambdas, tail, K


# ---------------------------------------------------------------------------
# stochastic Stokes consistency
# ---------------------------------------------------------------------------

def stokes_consistency(chart, forms, path):
    """Difference between the line-integral and area-integral expressions.

    Computes (i) the midpoint (Stratonovich) line integral of alpha along
    the recorded path plus the straight radial closing segment at the final
    time, and (ii) the area form sum int alpha_kernel o dA; returns
    line - area, which vanishes at discretization order for autonomous
    configurations.
    """
    from .om import alpha_form
    from numpy.polynomial.legendre import leggauss

    y = np.asarray(path.states, dtype=float)
    times = np.asarray(path.times, dtype=float)
    if y.shape[0] < 2:
        return 0.0
    mid = 0.5 * (y[:-1] + y[1:])
    tmid = 0.5 * (times[:-1] + times[1:])
    dy = np.diff(y, axis=0)

    line = 0.0
    area = 0.0
    for k in range(len(dy)):
        al = alpha_form(chart, forms.field, tmid[k], mid[k])
        line += float(al @ dy[k])
        K = forms.alpha_ij(tmid[k], mid[k])
        dA = _area_increment(y[k], y[k + 1])
        area += float(np.sum(K * dA))

    # closing radial segment from y(T) back to the origin at frozen time
    yT = y[-1]
    tT = times[-1]
    nodes, weights = leggauss(16)
    s = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    seg = 0.0
    for sv, wv in zip(s, w):
        seg += wv * float(alpha_form(chart, forms.field, tT, sv * yT) @ yT)
    line -= seg
    return line - area


def write_diagnostics_csv(fh, rows):
    """Diagnostic CSV: one row per ensemble cell."""
    import csv

    writer = csv.writer(fh)
    writer.writerow(["delta", "dt", "paths", "survivors", "radial_gap_max",
                     "orthogonality_stat", "h2_le_g_violations",
                     "tail_q50", "tail_q90", "tail_q99"])
    for r in rows:
        writer.writerow(r)
