"""Affinity propagation and the two-stage (communication, then data) device clustering."""
import time
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

EQUAL_TOL = 1e-12


@dataclass
class SimilarityMatrix:
    s: np.ndarray
    preference: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.s, dtype=np.float64)).copy()
        n = s.shape[0]
        if s.shape != (n, n) or n < 1:
            raise ValueError("similarity must be a nonempty square matrix")
        preference = np.broadcast_to(np.asarray(self.preference, dtype=np.float64), (n,)).copy()
        np.fill_diagonal(s, preference)
        if not np.all(np.isfinite(s)):
            raise ValueError("similarity entries must be finite")
        self.s = s
        self.preference = preference

    @property
    def n(self):
        return self.s.shape[0]


@dataclass
class ApState:
    responsibility: np.ndarray
    availability: np.ndarray
    iteration: int = 0
    stable_rounds: int = 0


@dataclass
class ClusterAssignment:
    exemplar_of: np.ndarray
    clusters: list
    unassigned: list = field(default_factory=list)
    iterations: int = 0
    exemplar_trace: list = field(default_factory=list)
    converged: bool = True

    @classmethod
    def from_labels(cls, exemplar_of, **kwargs):
        """Builds clusters from a device -> leader map, -1 marks an unassigned device"""
        exemplar_of = np.asarray(exemplar_of, dtype=np.int64)
        leaders = sorted(set(int(e) for e in exemplar_of if e >= 0))
        clusters = [(leader, [int(k) for k in np.flatnonzero(exemplar_of == leader)]) for leader in leaders]
        for leader, members in clusters:
            if leader not in members:
                raise ValueError("leader {} is not a member of its own cluster".format(leader))
        unassigned = [int(k) for k in np.flatnonzero(exemplar_of < 0)]
        return cls(exemplar_of=exemplar_of, clusters=clusters, unassigned=unassigned, **kwargs)

    @property
    def leaders(self):
        return [leader for leader, _ in self.clusters]

    @property
    def cluster_count(self):
        return len(self.clusters)

    def cluster_index(self):
        """device -> position of its cluster in self.clusters"""
        index = np.full(self.exemplar_of.shape, -1, dtype=np.int64)
        for c, (_, members) in enumerate(self.clusters):
            index[members] = c
        return index

    def to_dict(self):
        return dict(clusters=[dict(leader=leader, members=members) for leader, members in self.clusters],
                    unassigned=list(self.unassigned), iterations=self.iterations,
                    exemplar_trace_length=len(self.exemplar_trace), converged=self.converged)


def median_off_diagonal(s):
    n = s.shape[0]
    if n < 2:
        return 0.0
    return float(np.median(s[~np.eye(n, dtype=bool)]))


def comm_similarity(gamma, preference=None, mode='literal'):
    """Communication similarity from an SNR matrix

    Arguments:
        gamma {ndarray} -- K x K SNR matrix, device-to-BS SNR on the diagonal

    Keyword Arguments:
        preference {float|ndarray} -- Diagonal values, None takes the median off-diagonal similarity (default: {None})
        mode {str} -- 'literal' gives -gamma_ik^2, 'difference' gives -(gamma_i - gamma_k)^2 (default: {'literal'})

    Returns:
        SimilarityMatrix
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
    if gamma.shape[0] != gamma.shape[1]:
        raise ValueError("SNR matrix must be square")
    if mode == 'literal':
        s = -gamma ** 2
    elif mode == 'difference':
        diag = np.diag(gamma)
        s = -(diag[:, None] - diag[None, :]) ** 2
    else:
        raise ValueError("unknown similarity mode {!r}".format(mode))
    if preference is None:
        preference = median_off_diagonal(s)
    return SimilarityMatrix(s, preference)


def data_similarity(xi, subset, preference_d=None, literal_sign=False):
    """Data similarity between devices of one primary cluster: -(sum_l (Xi_i - Xi_k)^2)^2

    literal_sign keeps the nonnegative form as written, which inverts the clustering semantics.
    """
    subset = [int(k) for k in subset]
    if len(subset) < 1:
        raise ValueError("data_similarity needs at least one device")
    rows = np.asarray(xi, dtype=np.float64)[subset]
    squared = np.sum((rows[:, None, :] - rows[None, :, :]) ** 2, axis=-1)
    s = squared ** 2 if literal_sign else -squared ** 2
    if preference_d is None:
        preference_d = median_off_diagonal(s)
    return SimilarityMatrix(s, preference_d)


def _degenerate_assignment(similarity: SimilarityMatrix):
    """Closed-form outcome when every off-diagonal and every preference are equal, else None"""
    s, n = similarity.s, similarity.n
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    off = s[~np.eye(n, dtype=bool)]
    pref = similarity.preference
    # relative tolerance, SNR-based similarities can be ~1e-14 in absolute terms
    scale = np.max(np.abs(s))
    if np.ptp(off) > EQUAL_TOL * scale or np.ptp(pref) > EQUAL_TOL * scale:
        return None
    if pref[0] > off[0] + EQUAL_TOL * scale:
        return np.arange(n, dtype=np.int64)
    return np.zeros(n, dtype=np.int64)


def net_similarity(s, exemplars):
    """Objective AP maximizes: preferences of exemplars plus each point's best exemplar similarity"""
    exemplars = np.asarray(sorted(exemplars), dtype=np.int64)
    n = s.shape[0]
    others = np.setdiff1d(np.arange(n), exemplars)
    total = np.sum(s[exemplars, exemplars])
    if others.size:
        total += np.sum(np.max(s[np.ix_(others, exemplars)], axis=1))
    return float(total)


def ap_step(state: ApState, s, damping):
    """One damped responsibility/availability update"""
    n = s.shape[0]
    rows = np.arange(n)
    a_s = state.availability + s
    first_idx = np.argmax(a_s, axis=1)
    first = a_s[rows, first_idx]
    a_s[rows, first_idx] = -np.inf
    second = np.max(a_s, axis=1)
    r_new = s - first[:, None]
    r_new[rows, first_idx] = s[rows, first_idx] - second
    responsibility = damping * state.responsibility + (1 - damping) * r_new

    r_pos = np.maximum(responsibility, 0)
    r_pos[rows, rows] = responsibility[rows, rows]
    a_new = r_pos.sum(axis=0)[None, :] - r_pos
    self_availability = a_new[rows, rows].copy()
    a_new = np.minimum(a_new, 0)
    a_new[rows, rows] = self_availability
    availability = damping * state.availability + (1 - damping) * a_new
    return ApState(responsibility, availability, state.iteration + 1, state.stable_rounds)


def ap_cluster(similarity: SimilarityMatrix, damping=0.5, max_iter=500, stable_window=10, resolve_orphans=True):
    """Affinity propagation clustering

    A point is an exemplar when the row maximum of R + A sits on the diagonal. Iteration stops
    once the exemplar set is nonempty and unchanged for stable_window rounds, or at max_iter.
    A non-exemplar attaches to the exemplar in its arg-max column; if that column is not an exemplar
    it goes to its most similar exemplar (resolve_orphans) or stays unassigned (-1).

    Arguments:
        similarity {SimilarityMatrix} -- Similarities with preferences on the diagonal

    Keyword Arguments:
        damping {float} -- Message damping in [0.5, 1) (default: {0.5})
        max_iter {int} -- Iteration cap (default: {500})
        stable_window {int} -- Rounds without exemplar change needed to stop (default: {10})
        resolve_orphans {bool} -- Attach orphans by similarity (default: {True})

    Returns:
        ClusterAssignment
    """
    if not 0.5 <= damping < 1.0:
        raise ValueError("damping must lie in [0.5, 1)")
    if not max_iter >= stable_window >= 1:
        raise ValueError("need max_iter >= stable_window >= 1")
    s, n = similarity.s, similarity.n

    labels = _degenerate_assignment(similarity)
    if labels is not None:
        trace = [tuple(sorted(set(labels.tolist())))]
        return ClusterAssignment.from_labels(labels, iterations=0, exemplar_trace=trace, converged=True)

    t0 = time.perf_counter()
    state = ApState(np.zeros((n, n)), np.zeros((n, n)))
    exemplars, trace, converged = (), [], False
    for _ in range(max_iter):
        state = ap_step(state, s, damping)
        evidence = state.responsibility + state.availability
        current = tuple(int(k) for k in np.flatnonzero(np.argmax(evidence, axis=1) == np.arange(n)))
        if current == exemplars and current:
            state.stable_rounds += 1
        else:
            state.stable_rounds = 0
            exemplars = current
            trace.append(current)
        if state.stable_rounds >= stable_window:
            converged = True
            break
    t1 = time.perf_counter()
    logging.debug("Affinity propagation Took (ms): %.2f; iterations: %d", (t1 - t0) * 1000, state.iteration)

    if not exemplars:
        fallback = int(np.argmax(similarity.preference))
        logging.warning("Affinity propagation produced no exemplar, device %d becomes the sole exemplar", fallback)
        labels = np.full(n, fallback, dtype=np.int64)
        return ClusterAssignment.from_labels(labels, iterations=state.iteration,
                                             exemplar_trace=trace + [(fallback,)], converged=False)
    if not converged:
        logging.warning("Affinity propagation hit max_iter=%d before %d stable rounds", max_iter, stable_window)

    exemplar_arr = np.asarray(exemplars, dtype=np.int64)
    is_exemplar = np.zeros(n, dtype=bool)
    is_exemplar[exemplar_arr] = True
    evidence = state.responsibility + state.availability
    labels = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if is_exemplar[i]:
            labels[i] = i
            continue
        column = int(np.argmax(evidence[i]))
        if is_exemplar[column]:
            labels[i] = column
        elif resolve_orphans:
            labels[i] = int(exemplar_arr[np.argmax(s[i, exemplar_arr])])
    return ClusterAssignment.from_labels(labels, iterations=state.iteration, exemplar_trace=trace,
                                         converged=converged)


def assign_stragglers(unassigned, assignment: ClusterAssignment, geometry):
    """Each straggler joins the cluster of its nearest leader, ties go to the lower leader index"""
    if not assignment.clusters:
        raise ValueError("assign_stragglers needs at least one cluster")
    exemplar_of = assignment.exemplar_of.copy()
    leaders = np.asarray(sorted(assignment.leaders), dtype=np.int64)
    positions = geometry.device_positions
    unassigned = [int(u) for u in unassigned]
    if unassigned:
        distances = cdist(positions[unassigned], positions[leaders])
        # argmin returns the first minimum, leaders are sorted ascending
        for device, nearest in zip(unassigned, np.argmin(distances, axis=1)):
            exemplar_of[device] = leaders[int(nearest)]
    remaining = [k for k in assignment.unassigned if k not in set(unassigned)]
    result = ClusterAssignment.from_labels(exemplar_of, iterations=assignment.iterations,
                                           exemplar_trace=assignment.exemplar_trace, converged=assignment.converged)
    if remaining:
        logging.warning("Devices %r remain unassigned", remaining)
    return result


def dual_segment_cluster(gamma, xi, geometry=None, similarity_mode='literal', preference=None, preference_d=None,
                         literal_sign=False, damping=0.5, max_iter=500, stable_window=10):
    """Primary clustering on communication quality, secondary clustering on data within each primary cluster

    Secondary exemplars become leaders. Devices left without a cluster are placed by
    assign_stragglers when a geometry is given, else by similarity.

    Arguments:
        gamma {ndarray} -- K x K SNR matrix
        xi {ndarray} -- K x L information matrix

    Keyword Arguments:
        geometry {Geometry} -- Device positions for straggler assignment (default: {None})

    Returns:
        ClusterAssignment -- Over all K devices
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    K = gamma.shape[0]
    if xi.shape[0] != K:
        raise ValueError("SNR matrix has {} devices, information matrix {}".format(K, xi.shape[0]))
    resolve = geometry is None
    ap_kwargs = dict(damping=damping, max_iter=max_iter, stable_window=stable_window, resolve_orphans=resolve)

    t0 = time.perf_counter()
    primary = ap_cluster(comm_similarity(gamma, preference, mode=similarity_mode), **ap_kwargs)
    t1 = time.perf_counter()
    logging.info("Primary clustering: %d clusters (%d iterations)", primary.cluster_count, primary.iterations)

    exemplar_of = np.full(K, -1, dtype=np.int64)
    trace = list(primary.exemplar_trace)
    iterations = primary.iterations
    converged = primary.converged
    for _, members in primary.clusters:
        if len(members) == 1:
            exemplar_of[members[0]] = members[0]
            continue
        secondary = ap_cluster(data_similarity(xi, members, preference_d, literal_sign), **ap_kwargs)
        iterations += secondary.iterations
        converged = converged and secondary.converged
        trace += [tuple(members[e] for e in exemplars) for exemplars in secondary.exemplar_trace]
        for local, leader in enumerate(secondary.exemplar_of):
            if leader >= 0:
                exemplar_of[members[local]] = members[leader]
    t2 = time.perf_counter()
    logging.debug("Primary clustering Took (ms): %.2f; Secondary Took (ms): %.2f", (t1 - t0) * 1000, (t2 - t1) * 1000)

    assignment = ClusterAssignment.from_labels(exemplar_of, iterations=iterations, exemplar_trace=trace,
                                               converged=converged)
    if assignment.unassigned:
        logging.info("Assigning %d stragglers by proximity", len(assignment.unassigned))
        assignment = assign_stragglers(list(assignment.unassigned), assignment, geometry)
    logging.info("Dual segment clustering: %d clusters, leaders %r", assignment.cluster_count, assignment.leaders)
    return assignment
