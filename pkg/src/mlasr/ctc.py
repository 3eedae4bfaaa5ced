"""CTC loss over a blank-augmented label lattice, plus prefix scoring.

The loss marginalizes over every frame-level path whose collapse (merge
adjacent repeats, then drop blanks) equals the reference labels.  All
dynamic programming runs in log space.  Convention throughout: the frame
posterior matrix has one column per vocabulary entry plus a trailing
blank column, so blank = V for a vocabulary of size V.

`CtcPrefixScorer` scores every single-label extension of a search
hypothesis in one call; it is the piece a beam search combines with
per-step decoder posteriors.
"""

import numpy as np

from . import autodiff as ad


class CtcInfeasibleError(ValueError):
    """Raised when the target needs more frames than the input provides."""


def expand_with_blanks(target, blank):
    """Interleave blanks around labels: [b, t1, b, t2, ..., b]."""
    target = np.asarray(target, dtype=np.int64)
    z = np.full(2 * target.size + 1, blank, dtype=np.int64)
    z[1::2] = target
    return z


def min_frames(target):
    """Fewest frames that can emit the target: one per label plus one
    separating blank per adjacent repeat."""
    target = np.asarray(target, dtype=np.int64)
    if target.size == 0:
        return 0
    return int(target.size + np.count_nonzero(target[1:] == target[:-1]))


def collapse(path, blank):
    """Merge adjacent repeats, then remove blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return np.asarray(out, dtype=np.int64)


def greedy_labels(logprobs, blank=None):
    """Best-path decode: per-frame argmax, collapsed."""
    lp = np.asarray(logprobs, dtype=np.float64)
    if blank is None:
        blank = lp.shape[1] - 1
    return collapse(lp.argmax(axis=1), blank)


def _validate(lp, target, blank):
    if lp.ndim != 2:
        raise ad.ShapeError(f"ctc: log-prob matrix must be 2-d, got {lp.shape}")
    T, K = lp.shape
    if blank is None:
        blank = K - 1
    if not 0 <= blank < K:
        raise ValueError(f"ctc: blank index {blank} outside {K} classes")
    if target.size:
        if target.min() < 0 or target.max() >= K:
            raise ValueError("ctc: target label outside class range")
        if np.any(target == blank):
            raise ValueError("ctc: target contains the blank index")
    need = max(min_frames(target), 1)
    if T < need:
        raise CtcInfeasibleError(
            f"target of {target.size} labels needs >= {need} frames, got {T}")
    return blank


def ctc_forward_backward(logprobs, target, blank=None):
    """Lattice DP.  Returns (loglik, alpha, beta, z).

    alpha[t, s] includes the emission at frame t; beta[t, s] covers the
    suffix strictly after t.  For every t,
    logsumexp_s(alpha[t, s] + beta[t, s]) equals loglik.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    blank = _validate(lp, target, blank)
    T = lp.shape[0]

    z = expand_with_blanks(target, blank)
    S = z.size
    allow_skip = np.zeros(S, dtype=bool)
    if S > 2:
        allow_skip[2:] = (z[2:] != blank) & (z[2:] != z[:-2])

    emit = lp[:, z]  # (T, S)

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if S > 2:
            acc[2:] = np.logaddexp(acc[2:], np.where(allow_skip[2:], prev[:-2], -np.inf))
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if S > 2:
            acc[:-2] = np.logaddexp(acc[:-2], np.where(allow_skip[2:], nxt[2:], -np.inf))
        beta[t] = acc

    if S > 1:
        loglik = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        loglik = alpha[T - 1, S - 1]
    return float(loglik), alpha, beta, z


def ctc_loss(logprobs, target, blank=None):
    """Negative log likelihood of the target as a scalar graph node.

    logprobs: Tensor of shape (T, V+1) holding normalized per-frame
    log posteriors.  The gradient wrt entry (t, k) is the negated state
    occupancy summed over lattice states labeled k.
    """
    target = np.asarray(target, dtype=np.int64)
    loglik, alpha, beta, z = ctc_forward_backward(logprobs.value, target, blank)
    occ = np.exp(alpha + beta - loglik)
    dneg = np.zeros_like(logprobs.value)
    np.add.at(dneg, (slice(None), z), occ)

    def vjp(g):
        return -g * dneg

    return ad.Tensor(np.float64(-loglik), parents=(logprobs,), vjps=(vjp,),
                     name="ctc_loss")


class CtcPrefixScorer:
    """Incremental prefix scores over one utterance's frame posteriors.

    Per-hypothesis state is a (T, 2) array r: column 0 is the log prob
    of emitting the prefix with the path ending in its final label,
    column 1 with the path ending in blank.  `score` returns, for each
    candidate label c, the log probability that the utterance's output
    starts with prefix+[c]; an eos candidate instead gets the log
    probability that the output equals the prefix exactly.
    """

    def __init__(self, logprobs, eos, blank=None):
        self.lp = np.asarray(logprobs, dtype=np.float64)
        if self.lp.ndim != 2:
            raise ad.ShapeError(f"prefix scorer: need 2-d log probs, got {self.lp.shape}")
        self.T, K = self.lp.shape
        self.blank = K - 1 if blank is None else blank
        self.eos = eos

    def initial_state(self):
        r = np.full((self.T, 2), -np.inf)
        r[:, 1] = np.cumsum(self.lp[:, self.blank])
        return r

    def score(self, prefix, state, labels):
        """Score each extension of `prefix` by the labels in `labels`.

        Returns (psi, new_states); new_states[i] is the (T, 2) state for
        prefix+[labels[i]].  States returned for an eos label are
        meaningless since such hypotheses are final.
        """
        T, lp = self.T, self.lp
        labels = np.asarray(labels, dtype=np.int64)
        n = labels.size
        olen = len(prefix)
        r_sum = np.logaddexp(state[:, 0], state[:, 1])

        if olen > T:  # prefix cannot fit; only eos keeps a finite score
            psi = np.full(n, -np.inf)
            psi[labels == self.eos] = r_sum[T - 1]
            return psi, np.full((n, T, 2), -np.inf)

        xs = lp[:, labels]  # (T, n)
        r = np.full((T, 2, n), -np.inf)
        if olen == 0:
            r[0, 0] = xs[0]

        # phi[t]: prob of the prefix over frames 0..t in a form a new
        # label can follow; a repeat of the final label needs a blank.
        log_phi = np.broadcast_to(r_sum[:, None], (T, n)).copy()
        if olen > 0:
            log_phi[:, labels == prefix[-1]] = state[:, 1:2]

        start = max(olen, 1)
        psi = r[start - 1, 0].copy()
        for t in range(start, T):
            r[t, 0] = np.logaddexp(r[t - 1, 0], log_phi[t - 1]) + xs[t]
            r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + lp[t, self.blank]
            psi = np.logaddexp(psi, log_phi[t - 1] + xs[t])

        is_eos = labels == self.eos
        if np.any(is_eos):
            psi[is_eos] = r_sum[T - 1]
        return psi, np.moveaxis(r, 2, 0)
