"""Branch probabilities and cross-entropy over an episode's queries."""
import logging

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-30

# Incremented whenever branch_loss has to clamp a vanishing probability.
clamp_events = 0


def branch_probabilities(distances):
    """Softmax of negated distances along the last axis."""
    d = np.asarray(distances, dtype=np.float64)
    z = -d - np.max(-d, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def branch_loss(probabilities, labels):
    """Mean negative log-probability of each query's true class.

    Probabilities below ``PROB_FLOOR`` are clamped (with a warning) so the
    loss stays finite.
    """
    global clamp_events
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    true = p[np.arange(len(labels)), labels]
    low = true < PROB_FLOOR
    if np.any(low):
        clamp_events += int(low.sum())
        log.warning("clamped %d vanishing true-class probabilities", int(low.sum()))
        true = np.maximum(true, PROB_FLOOR)
    return float(-np.mean(np.log(true)))
