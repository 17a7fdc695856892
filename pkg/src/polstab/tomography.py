"""Two-qubit state tomography, one-sided process extraction, and generalized
Uhlmann fidelity series.

Coincidence counts over the 36 ordered polarization projection pairs (all
combinations of H, V, D, A, R, L on each arm) are simulated with Poisson
statistics, estimated by linear inversion over the over-complete projector
set followed by projection to the nearest density matrix, and scored with
the generalized Uhlmann fidelity F(a, b) = (Tr sqrt(sqrt(a) b sqrt(a)))^2,
which applies to any pair of positive semi-definite operators.

A stabilized link is judged by series of these estimates: the fidelity
between successive estimates and between the first estimate and each later
one, for both states and extracted single-sided processes (Choi matrices,
normalized to unit trace so process fidelities land in [0, 1]).
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .poincare import JONES_BASIS

HERMITICITY_TOL = 1e-9
PSD_TOL = 1e-9

SETTING_NAMES = ("H", "V", "D", "A", "R", "L")

PROJECTORS = {
    name: np.outer(vec, vec.conj()) for name, vec in JONES_BASIS.items()
}

ALL_SETTINGS = tuple(itertools.product(SETTING_NAMES, SETTING_NAMES))


def _as_matrix(m) -> np.ndarray:
    if isinstance(m, (DensityMatrix, ChoiMatrix)):
        return m.matrix
    return np.asarray(m, dtype=complex)


def _check_psd(m: np.ndarray, what: str, tol: float = PSD_TOL) -> None:
    if np.max(np.abs(m - m.conj().T)) > HERMITICITY_TOL:
        raise ValueError(f"{what} is not Hermitian within tolerance")
    w = np.linalg.eigvalsh((m + m.conj().T) / 2)
    if w.min() < -tol:
        raise ValueError(f"{what} has negative eigenvalue {w.min()} beyond tolerance")


@dataclass(frozen=True)
class DensityMatrix:
    """d x d Hermitian, PSD, unit-trace (d in {2, 4})."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape not in ((2, 2), (4, 4)):
            raise ValueError("density matrix must be 2x2 or 4x4")
        _check_psd(m, "density matrix")
        if abs(np.trace(m).real - 1.0) > 1e-9:
            raise ValueError("density matrix trace must be 1")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class ChoiMatrix:
    """4x4 PSD process representation, normalized to unit trace."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (4, 4):
            raise ValueError("Choi matrix must be 4x4")
        _check_psd(m, "Choi matrix")
        if abs(np.trace(m).real - 1.0) > 1e-6:
            raise ValueError("Choi matrix must be normalized to unit trace")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class TomographyRecord:
    """One 36-setting coincidence run."""

    counts: np.ndarray
    integration_s: float = 15.0
    window_ps: float = 660.0
    settings: tuple = ALL_SETTINGS

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (36,):
            raise ValueError("a tomography record holds exactly 36 counts")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        if tuple(self.settings) != ALL_SETTINGS:
            raise ValueError("settings must be the 36 ordered pairs of H,V,D,A,R,L")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "settings", ALL_SETTINGS)

    @property
    def total_counts(self) -> float:
        return float(self.counts.sum())


# --- fidelity ----------------------------------------------------------------

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def uhlmann_fidelity(a, b) -> float:
    """Generalized Uhlmann fidelity (Tr sqrt(sqrt(a) b sqrt(a)))^2.

    Defined for any two PSD operators of equal dimension; for unit-trace
    inputs the value lies in [0, 1]. Computed by eigendecomposition.
    """
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape != b.shape:
        raise ValueError("operands must share a dimension")
    _check_psd(a, "first operand")
    _check_psd(b, "second operand")
    ra = _sqrtm_psd((a + a.conj().T) / 2)
    inner = ra @ ((b + b.conj().T) / 2) @ ra
    w = np.linalg.eigvalsh((inner + inner.conj().T) / 2)
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))) ** 2)


# --- states and sources -------------------------------------------------------

def bell_phi_plus() -> np.ndarray:
    """|HH> + |VV| (normalized) as a 4x4 density matrix."""
    psi = np.zeros(4, dtype=complex)
    psi[0] = psi[3] = 1 / math.sqrt(2)
    return np.outer(psi, psi.conj())


def werner_state(w: float) -> np.ndarray:
    """Bell state mixed with white noise; w = 1 is the ideal pair source."""
    return w * bell_phi_plus() + (1 - w) * np.eye(4) / 4


def setting_projector(a: str, b: str) -> np.ndarray:
    return np.kron(PROJECTORS[a], PROJECTORS[b])


def expected_counts(state, pair_rate: float, integration_s: float) -> np.ndarray:
    rho = _as_matrix(state)
    return np.array([
        pair_rate * integration_s * np.real(np.trace(setting_projector(a, b) @ rho))
        for a, b in ALL_SETTINGS
    ])


def simulate_tomography(state, pair_rate: float, integration_s: float,
                        seed: int = 0, background_rate: float = 0.0,
                        poisson: bool = True) -> TomographyRecord:
    """Draw one 36-setting coincidence record from a two-qubit state.

    Expected counts per setting are pair_rate * time * Tr[(Pa x Pb) rho]
    plus a uniform background; observed counts are Poisson unless disabled.
    """
    if pair_rate <= 0 or integration_s <= 0:
        raise ValueError("pair rate and integration time must be positive")
    mean = expected_counts(state, pair_rate, integration_s)
    mean = np.clip(mean, 0.0, None) + background_rate * integration_s
    if poisson:
        rng = np.random.default_rng(seed)
        counts = rng.poisson(mean).astype(float)
    else:
        counts = mean
    return TomographyRecord(counts=counts, integration_s=integration_s)


# --- estimation ---------------------------------------------------------------

def _project_to_density(m: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD unit-trace matrix: eigenvalues onto the simplex."""
    m = (m + m.conj().T) / 2
    w, v = np.linalg.eigh(m)
    # Euclidean projection of the eigenvalue vector onto the probability simplex.
    u = np.sort(w)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(u) + 1)
    valid = u - (css - 1.0) / ks > 0
    k = ks[valid][-1]
    tau = (css[k - 1] - 1.0) / k
    w = np.clip(w - tau, 0.0, None)
    return (v * w) @ v.conj().T


def estimate_state(record: TomographyRecord) -> np.ndarray:
    """Linear inversion over the over-complete 36-projector set, then
    projection to the nearest density matrix.

    The per-setting normalization is estimated from the data itself: the four
    settings of each of the nine basis pairs sum to the full pair flux, so
    the estimator is invariant to scaling all counts.
    """
    counts = record.counts
    if counts.sum() <= 0:
        raise ValueError("cannot estimate a state from all-zero counts")
    groups = {}
    for (a, b), c in zip(ALL_SETTINGS, counts):
        key = (a in ("H", "V"), a in ("D", "A"), b in ("H", "V"), b in ("D", "A"))
        groups.setdefault(key, 0.0)
        groups[key] += c
    n_hat = float(np.mean(list(groups.values())))
    freqs = counts / n_hat
    basis = np.array([setting_projector(a, b).conj().ravel() for a, b in ALL_SETTINGS])
    rho_vec, *_ = np.linalg.lstsq(basis, freqs, rcond=None)
    rho = rho_vec.reshape(4, 4)
    return _project_to_density(rho)


# --- process extraction ---------------------------------------------------------

def choi_of_unitary(u) -> np.ndarray:
    """Unit-trace Choi matrix of a single-qubit unitary."""
    u = np.asarray(u, dtype=complex)
    c = np.einsum("ki,lj->ikjl", u, u.conj()).reshape(4, 4)
    return c / np.trace(c).real


def apply_choi_one_sided(choi, state) -> np.ndarray:
    """Apply a (trace-normalized) Choi process to the first qubit of a pair."""
    c = _as_matrix(choi).reshape(2, 2, 2, 2)  # [i, k, j, l]
    rho = _as_matrix(state).reshape(2, 2, 2, 2)  # [(i, b'), (j, b)]
    out = np.einsum("ibjc,ikjl->kblc", rho, c).reshape(4, 4)
    return 2.0 * out  # undo the trace-1 normalization (ideal channels have trace 2)


def choi_from_two_qubit(state, reference, rank_tol: float = 1e-7) -> np.ndarray:
    """Extract the one-sided process mapping `reference` to `state`.

    Uses channel-state duality: the process Choi matrix is the least-squares
    solution of (process x identity)(reference) = state, then projected to
    PSD and normalized to unit trace. The reference must be full rank when
    reshuffled on the traversed side, else the system is underdetermined.
    """
    rho_n = _as_matrix(state)
    rho_ref = _as_matrix(reference)
    if rho_n.shape != (4, 4) or rho_ref.shape != (4, 4):
        raise ValueError("both states must be two-qubit (4x4)")
    ref_t = rho_ref.reshape(2, 2, 2, 2)  # [i, b', j, b]
    k_ref = ref_t.transpose(0, 2, 1, 3).reshape(4, 4)  # [(i, j), (b', b)]
    svals = np.linalg.svd(k_ref, compute_uv=False)
    if svals[-1] < rank_tol * svals[0]:
        raise ValueError(
            "reference state is rank-deficient on the traversed side; the "
            "process is not identifiable from it"
        )
    y_n = rho_n.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)  # [(k,l),(b',b)]
    c2, *_ = np.linalg.lstsq(k_ref.T, y_n.T, rcond=None)  # [(i,j),(k,l)]
    c = c2.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)  # [(i,k),(j,l)]
    c = (c + c.conj().T) / 2
    w, v = np.linalg.eigh(c)
    w = np.clip(w, 0.0, None)
    c = (v * w) @ v.conj().T
    tr = np.trace(c).real
    if tr <= 0:
        raise ValueError("extracted process has nonpositive trace")
    return c / tr


# --- series analysis ------------------------------------------------------------

def fidelity_series(records, include_process: bool = True) -> dict:
    """Relative-fidelity series over an ordered run of tomographies.

    Accepts TomographyRecords (estimated first) or density matrices. Returns
    the successive series F(rho_n, rho_n+1), the vs-first series F(rho_1,
    rho_n), mean/std summaries, and (optionally) the analogous series for the
    one-sided processes extracted against the first estimate as reference.
    """
    records = list(records)
    if len(records) < 2:
        raise ValueError("a fidelity series needs at least two records")
    if isinstance(records[0], TomographyRecord):
        states = [estimate_state(r) for r in records]
    else:
        states = [_as_matrix(r) for r in records]
    successive = np.array([
        uhlmann_fidelity(states[i], states[i + 1]) for i in range(len(states) - 1)
    ])
    vs_first = np.array([
        uhlmann_fidelity(states[0], states[i]) for i in range(1, len(states))
    ])
    out = {
        "successive": successive,
        "vs_first": vs_first,
        "successive_mean": float(successive.mean()),
        "successive_std": float(successive.std()),
        "vs_first_mean": float(vs_first.mean()),
        "vs_first_std": float(vs_first.std()),
    }
    if include_process:
        reference = states[0]
        chois = []
        for s in states[1:]:
            try:
                chois.append(choi_from_two_qubit(s, reference))
            except ValueError:
                chois.append(None)
        valid = [c for c in chois if c is not None]
        if len(valid) >= 2:
            p_succ = np.array([
                uhlmann_fidelity(valid[i], valid[i + 1]) for i in range(len(valid) - 1)
            ])
            p_first = np.array([
                uhlmann_fidelity(valid[0], valid[i]) for i in range(1, len(valid))
            ])
            out.update({
                "process_successive": p_succ,
                "process_vs_first": p_first,
                "process_successive_mean": float(p_succ.mean()),
                "process_successive_std": float(p_succ.std()),
                "process_vs_first_mean": float(p_first.mean()),
                "process_vs_first_std": float(p_first.std()),
            })
    return out


# --- I/O -------------------------------------------------------------------------

def write_record_csv(path, record: TomographyRecord) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting_a", "setting_b", "counts", "integration_s", "window_ps"])
        for (a, b), c in zip(record.settings, record.counts):
            writer.writerow([a, b, int(c), repr(float(record.integration_s)),
                             repr(float(record.window_ps))])


def load_record_csv(path) -> TomographyRecord:
    counts = {}
    integration = 15.0
    window = 660.0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            counts[(row["setting_a"], row["setting_b"])] = float(row["counts"])
            integration = float(row["integration_s"])
            window = float(row["window_ps"])
    ordered = np.array([counts[s] for s in ALL_SETTINGS])
    return TomographyRecord(counts=ordered, integration_s=integration, window_ps=window)


def write_fidelity_series_csv(path, series: dict) -> None:
    """Series export: one row per tomography index n (from 2), with the
    successive and vs-first fidelities and, when present, the process series
    (which starts one index later since the first estimate is the reference)."""
    columns = {
        "successive": list(series["successive"]),
        "vs_first": list(series["vs_first"]),
    }
    if "process_successive" in series:
        # first extracted process comes from tomography 2, so its series lags
        columns["process_successive"] = [""] + list(series["process_successive"])
        columns["process_vs_first"] = [""] + list(series["process_vs_first"])
    n_rows = max(len(v) for v in columns.values())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n"] + list(columns))
        for i in range(n_rows):
            row = [i + 2]
            for values in columns.values():
                v = values[i] if i < len(values) else ""
                row.append(repr(float(v)) if v != "" else "")
            writer.writerow(row)
