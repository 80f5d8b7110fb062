"""Annotated transition system baseline.

Every training prefix is mapped to an abstract state (its last k activities
as a sequence, set or multiset), and every state is annotated with the
remaining times of the prefixes that reach it. Predictions back off to
shorter horizons and finally to the global statistics for unseen states.
"""
import logging
from collections import defaultdict
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy
from pydantic import BaseModel

from remtime.models import Case, StateAnnotation
from remtime.utils import SECONDS_PER_DAY, ContractError

logger = logging.getLogger(__name__)

State = Tuple[str, ...]


def abstract(
    activities: Sequence[str], abstraction: str, horizon: Optional[int]
) -> State:
    """Abstract state of a prefix given by its activity labels.

    A horizon of None uses the whole prefix.
    """
    window = list(activities if horizon is None else activities[-horizon:])
    if abstraction == "sequence":
        return tuple(window)
    elif abstraction == "set":
        return tuple(sorted(set(window)))
    elif abstraction == "multiset":
        return tuple(sorted(window))
    raise ContractError(f"Unknown abstraction '{abstraction}'.")


def _annotate(values: List[float]) -> StateAnnotation:
    array = numpy.asarray(values, dtype=float)
    return StateAnnotation(
        count=len(values), mean=float(array.mean()), median=float(numpy.median(array))
    )


class AnnotatedTransitionSystem(BaseModel):
    """States per horizon annotated with remaining-time statistics.

    `states` maps each horizon (1..k, or None for whole prefixes) to its
    annotated states.
    """

    abstraction: Literal["sequence", "set", "multiset"] = "sequence"
    horizon: Optional[int] = 2
    statistic: Literal["mean", "median"] = "mean"
    states: Dict[Optional[int], Dict[State, StateAnnotation]]
    fallback: StateAnnotation
    minimum: float
    maximum: float

    class Config:  # noqa: D106
        allow_mutation = False

    @property
    def horizons(self) -> List[Optional[int]]:
        """Horizons from the longest to the shortest."""
        if self.horizon is None:
            return [None]
        return list(range(self.horizon, 0, -1))

    def _value(self, annotation: StateAnnotation) -> float:
        return annotation.mean if self.statistic == "mean" else annotation.median


def build_ats(
    cases: Sequence[Case],
    abstraction: str = "sequence",
    horizon: Optional[int] = 2,
    statistic: str = "mean",
) -> AnnotatedTransitionSystem:
    """Annotate the abstract states of every training prefix.

    Raises:
        ContractError: No cases, or a horizon below 1.
    """
    if not cases:
        raise ContractError("build_ats needs at least one training case.")
    if horizon is not None and horizon < 1:
        raise ContractError(f"horizon must be >= 1 or None, got {horizon}.")

    horizons = [None] if horizon is None else list(range(1, horizon + 1))
    collected: Dict[Optional[int], Dict[State, List[float]]] = {
        h: defaultdict(list) for h in horizons
    }
    everything: List[float] = []
    for case in cases:
        activities = case.activities
        for k, event in enumerate(case.events, start=1):
            remaining = (case.end - event.timestamp).total_seconds() / SECONDS_PER_DAY
            everything.append(remaining)
            for h in horizons:
                collected[h][abstract(activities[:k], abstraction, h)].append(remaining)

    states = {
        h: {state: _annotate(values) for state, values in by_state.items()}
        for h, by_state in collected.items()
    }
    logger.debug(
        f"Built a transition system with {sum(len(s) for s in states.values())} states."
    )
    return AnnotatedTransitionSystem(
        abstraction=abstraction,
        horizon=horizon,
        statistic=statistic,
        states=states,
        fallback=_annotate(everything),
        minimum=min(everything),
        maximum=max(everything),
    )


def predict_ats(ats: AnnotatedTransitionSystem, prefix: Sequence[str]) -> float:
    """Remaining time of a prefix given by its activity labels."""
    for h in ats.horizons:
        annotation = ats.states[h].get(abstract(prefix, ats.abstraction, h))
        if annotation is not None:
            return ats._value(annotation)
    return ats._value(ats.fallback)


def predict_prefixes(
    ats: AnnotatedTransitionSystem, cases: Sequence[Case]
) -> numpy.ndarray:
    """Predictions for every prefix, in the order `make_prefixes` encodes them."""
    return numpy.asarray(
        [
            predict_ats(ats, case.activities[:k])
            for case in cases
            for k in range(1, len(case) + 1)
        ],
        dtype=float,
    )
