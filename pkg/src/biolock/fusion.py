"""Score-level fusion: normalization, threshold alignment, sum-rule combination.

Each matcher (minutiae similarity, iris code distances) produces a raw score on
its own scale.  Fusion brings every score onto a common [0, 1] similarity scale
(:func:`normalize_score`, :func:`to_similarity`), aligns the per-classifier
decision thresholds onto one common threshold with a knot-preserving piecewise
linear map (:func:`rescale_to_common_threshold`), combines classifiers within a
trait and then traits with weighted sums (:func:`fuse_classifiers`,
:func:`fuse_modalities`), and finally thresholds the fused score into a
genuine/impostor decision (:func:`decide`).  :func:`fuse_pipeline` runs the
whole chain over a list of :class:`ClassifierScore` values.

Weighted sums are evaluated term-by-term (``w1*s1/total + w2*s2/total``) so the
documented reference values (for example ``fuse_classifiers(0.8, 0.6, 1, 1) ==
0.7``) hold exactly in IEEE arithmetic, and equal inputs short-circuit so the
sum rule is exactly idempotent for every weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Union

from .errors import DegenerateRange, NoScores, ZeroWeights

TRAIT_FINGER = "finger"
TRAIT_IRIS = "iris"
TRAITS = (TRAIT_FINGER, TRAIT_IRIS)

CLASSIFIER_MINUTIAE = "minutiae"
CLASSIFIER_REF = "ref"
CLASSIFIER_HAAR = "haar"
CLASSIFIER_MELLIN = "mellin"
CLASSIFIERS = (CLASSIFIER_MINUTIAE, CLASSIFIER_REF, CLASSIFIER_HAAR, CLASSIFIER_MELLIN)

#: Classifiers feeding each trait, ordered (alpha-weighted, beta-weighted).
TRAIT_CLASSIFIERS = {
    TRAIT_FINGER: (CLASSIFIER_REF, CLASSIFIER_MINUTIAE),
    TRAIT_IRIS: (CLASSIFIER_HAAR, CLASSIFIER_MELLIN),
}

GENUINE = "genuine"
IMPOSTOR = "impostor"

DEFAULT_THRESHOLD = 0.5

_FLOAT_KEYS = ("alpha", "beta", "a", "b", "c", "d", "common_threshold")
_THRESHOLD_PREFIX = "threshold."
_BOOL_WORDS = {"true": True, "false": False}


def _check_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


def _check_unit(name: str, value: float) -> float:
    value = _check_finite(name, value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    return value


def _check_open_unit(name: str, value: float) -> float:
    value = _check_finite(name, value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must be in (0, 1), got {value!r}")
    return value


@dataclass(frozen=True)
class ClassifierScore:
    """One matcher's raw output, tagged with everything fusion needs.

    ``range_lo``/``range_hi`` give the raw scale for normalization; the
    matchers shipped here (minutiae similarity, Hamming distances) already
    live on [0, 1], so the defaults apply.
    """

    trait: str
    classifier: str
    value: float
    is_distance: bool
    range_lo: float = 0.0
    range_hi: float = 1.0

    def __post_init__(self) -> None:
        if self.trait not in TRAITS:
            raise ValueError(f"unknown trait {self.trait!r}; expected one of {TRAITS}")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(
                f"unknown classifier {self.classifier!r}; expected one of {CLASSIFIERS}"
            )
        if self.classifier not in TRAIT_CLASSIFIERS[self.trait]:
            raise ValueError(
                f"classifier {self.classifier!r} does not belong to trait {self.trait!r}"
            )
        object.__setattr__(self, "value", _check_finite("value", self.value))
        object.__setattr__(self, "is_distance", bool(self.is_distance))
        lo = _check_finite("range_lo", self.range_lo)
        hi = _check_finite("range_hi", self.range_hi)
        if not lo < hi:
            raise DegenerateRange(f"range [{lo!r}, {hi!r}] has no extent")
        object.__setattr__(self, "range_lo", lo)
        object.__setattr__(self, "range_hi", hi)


def _default_thresholds() -> Mapping[str, float]:
    return MappingProxyType({name: DEFAULT_THRESHOLD for name in CLASSIFIERS})


@dataclass(frozen=True)
class FusionConfig:
    """Weights and thresholds for the fusion pipeline.

    ``alpha``/``beta`` weight the two classifiers within a trait, ``a``/``b``
    weight the two traits.  ``c`` and ``d`` are accepted for config-file
    compatibility but take part in no computation.  ``paper_faithful_final``
    switches the cross-trait sum from the normalized mean to the fixed
    one-quarter form ``0.25 * (a*ms_finger + b*ms_iris)``.
    """

    alpha: float = 1.0
    beta: float = 1.0
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0
    common_threshold: float = DEFAULT_THRESHOLD
    classifier_thresholds: Mapping[str, float] = field(default_factory=_default_thresholds)
    paper_faithful_final: bool = False

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "a", "b", "c", "d"):
            weight = _check_finite(name, getattr(self, name))
            if weight < 0.0:
                raise ValueError(f"{name} must be >= 0, got {weight!r}")
            object.__setattr__(self, name, weight)
        if self.alpha + self.beta <= 0.0:
            raise ZeroWeights("classifier weights alpha and beta are both zero")
        if self.a + self.b <= 0.0:
            raise ZeroWeights("trait weights a and b are both zero")
        object.__setattr__(
            self, "common_threshold", _check_open_unit("common_threshold", self.common_threshold)
        )
        merged = {name: DEFAULT_THRESHOLD for name in CLASSIFIERS}
        for name, value in dict(self.classifier_thresholds).items():
            if name not in CLASSIFIERS:
                raise ValueError(f"threshold for unknown classifier {name!r}")
            merged[name] = _check_open_unit(f"threshold.{name}", value)
        object.__setattr__(self, "classifier_thresholds", MappingProxyType(merged))
        object.__setattr__(self, "paper_faithful_final", bool(self.paper_faithful_final))

    def threshold_for(self, classifier: str) -> float:
        """Return the decision threshold for ``classifier`` (similarity scale)."""
        if classifier not in CLASSIFIERS:
            raise ValueError(f"unknown classifier {classifier!r}")
        return self.classifier_thresholds[classifier]


@dataclass(frozen=True)
class FusedScore:
    """The pipeline's result: per-trait scores, final score, and decision.

    A trait absent from the input leaves its per-trait score as ``None``.
    """

    ms_finger: Optional[float]
    ms_iris: Optional[float]
    ms_final: float
    decision: str

    def __post_init__(self) -> None:
        for name in ("ms_finger", "ms_iris"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _check_finite(name, value))
        object.__setattr__(self, "ms_final", _check_finite("ms_final", self.ms_final))
        if self.decision not in (GENUINE, IMPOSTOR):
            raise ValueError(f"decision must be {GENUINE!r} or {IMPOSTOR!r}, got {self.decision!r}")


def normalize_score(raw: float, range_lo: float, range_hi: float) -> float:
    """Map ``raw`` linearly from [range_lo, range_hi] onto [0, 1], clamping."""
    raw = _check_finite("raw", raw)
    lo = _check_finite("range_lo", range_lo)
    hi = _check_finite("range_hi", range_hi)
    if not lo < hi:
        raise DegenerateRange(f"range [{lo!r}, {hi!r}] has no extent")
    return min(1.0, max(0.0, (raw - lo) / (hi - lo)))


def to_similarity(score: float, is_distance: bool) -> float:
    """Return ``1 - score`` for distances, ``score`` unchanged for similarities."""
    score = _check_unit("score", score)
    return 1.0 - score if is_distance else score


def rescale_to_common_threshold(score: float, t_classifier: float, t_common: float) -> float:
    """Piecewise-linear remap with knots (0, 0), (t_classifier, t_common), (1, 1).

    Every classifier's own threshold lands exactly on the common threshold, so
    a single decision boundary serves all of them: ``score >= t_classifier``
    holds if and only if the rescaled score is ``>= t_common``.
    """
    score = _check_unit("score", score)
    t_classifier = _check_open_unit("t_classifier", t_classifier)
    t_common = _check_open_unit("t_common", t_common)
    if score == 0.0:
        return 0.0
    if score == 1.0:
        return 1.0
    if score >= t_classifier:
        rescaled = t_common + ((score - t_classifier) / (1.0 - t_classifier)) * (1.0 - t_common)
    else:
        rescaled = (score / t_classifier) * t_common
    return min(1.0, max(0.0, rescaled))


def fuse_classifiers(s1: float, s2: float, w1: float, w2: float) -> float:
    """Weighted sum rule over two classifier scores: (w1*s1 + w2*s2)/(w1 + w2)."""
    s1 = _check_unit("s1", s1)
    s2 = _check_unit("s2", s2)
    for name, weight in (("w1", w1), ("w2", w2)):
        weight = _check_finite(name, weight)
        if weight < 0.0:
            raise ValueError(f"{name} must be >= 0, got {weight!r}")
    total = w1 + w2
    if total <= 0.0:
        raise ZeroWeights("classifier weights sum to zero")
    if s1 == s2:
        return s1
    return min(1.0, max(0.0, (w1 * s1) / total + (w2 * s2) / total))


def fuse_modalities(ms_finger: float, ms_iris: float, cfg: FusionConfig) -> float:
    """Combine the two trait scores with the cross-trait sum rule.

    Normalized mode divides by ``a + b`` so the result stays in [0, 1];
    paper-faithful mode keeps the fixed factor ``0.25`` as printed, in which
    case a perfect match under unit weights scores 0.5.
    """
    ms_finger = _check_unit("ms_finger", ms_finger)
    ms_iris = _check_unit("ms_iris", ms_iris)
    total = cfg.a + cfg.b
    if total <= 0.0:
        raise ZeroWeights("trait weights sum to zero")
    if cfg.paper_faithful_final:
        return 0.25 * (cfg.a * ms_finger + cfg.b * ms_iris)
    if ms_finger == ms_iris:
        return ms_finger
    return min(1.0, max(0.0, (cfg.a * ms_finger) / total + (cfg.b * ms_iris) / total))


def decide(ms_final: float, threshold: float) -> str:
    """Threshold the final score; a score exactly at the threshold is genuine."""
    ms_final = _check_finite("ms_final", ms_final)
    threshold = _check_open_unit("threshold", threshold)
    return GENUINE if ms_final >= threshold else IMPOSTOR


def fuse_pipeline(scores: Sequence[ClassifierScore], cfg: FusionConfig) -> FusedScore:
    """Run the full fusion chain over raw classifier scores.

    Each score is normalized, converted to a similarity, and rescaled onto the
    common threshold; classifiers are fused within each trait (a lone
    classifier passes through unfused), traits are fused across (a lone trait
    passes through with full weight), and the result is thresholded.
    """
    scores = list(scores)
    if not scores:
        raise NoScores("no classifier scores to fuse")
    per_trait: dict = {}
    for score in scores:
        if not isinstance(score, ClassifierScore):
            raise TypeError(f"expected ClassifierScore, got {type(score).__name__}")
        normalized = normalize_score(score.value, score.range_lo, score.range_hi)
        similarity = to_similarity(normalized, score.is_distance)
        rescaled = rescale_to_common_threshold(
            similarity, cfg.threshold_for(score.classifier), cfg.common_threshold
        )
        slot = per_trait.setdefault(score.trait, {})
        if score.classifier in slot:
            raise ValueError(f"duplicate {score.trait}/{score.classifier} score")
        slot[score.classifier] = rescaled
    trait_scores = {}
    for trait, by_classifier in per_trait.items():
        first, second = TRAIT_CLASSIFIERS[trait]
        if len(by_classifier) == 2:
            trait_scores[trait] = fuse_classifiers(
                by_classifier[first], by_classifier[second], cfg.alpha, cfg.beta
            )
        else:
            (trait_scores[trait],) = by_classifier.values()
    ms_finger = trait_scores.get(TRAIT_FINGER)
    ms_iris = trait_scores.get(TRAIT_IRIS)
    if ms_finger is not None and ms_iris is not None:
        ms_final = fuse_modalities(ms_finger, ms_iris, cfg)
    elif ms_finger is not None:
        ms_final = ms_finger
    else:
        ms_final = ms_iris
    return FusedScore(
        ms_finger=ms_finger,
        ms_iris=ms_iris,
        ms_final=ms_final,
        decision=decide(ms_final, cfg.common_threshold),
    )


def save_config(cfg: FusionConfig, path: Union[str, Path]) -> None:
    """Write ``cfg`` as a flat ``key = value`` text file."""
    lines = [
        f"alpha = {cfg.alpha!r}",
        f"beta = {cfg.beta!r}",
        f"a = {cfg.a!r}",
        f"b = {cfg.b!r}",
        f"c = {cfg.c!r}",
        f"d = {cfg.d!r}",
        f"common_threshold = {cfg.common_threshold!r}",
        f"threshold.minutiae = {cfg.classifier_thresholds[CLASSIFIER_MINUTIAE]!r}",
        f"threshold.haar = {cfg.classifier_thresholds[CLASSIFIER_HAAR]!r}",
        f"threshold.mellin = {cfg.classifier_thresholds[CLASSIFIER_MELLIN]!r}",
        f"paper_faithful_final = {'true' if cfg.paper_faithful_final else 'false'}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path: Union[str, Path]) -> FusionConfig:
    """Parse a flat ``key = value`` config file written by :func:`save_config`.

    Blank lines and ``#`` comments are ignored.  Unknown keys, repeated keys,
    and unparsable values are errors.
    """
    text = Path(path).read_text(encoding="utf-8")
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}: line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValueError(f"{path}: line {lineno}: empty key")
        if key in raw:
            raise ValueError(f"{path}: line {lineno}: duplicate key {key!r}")
        raw[key] = (lineno, value)

    def parse_float(key: str, lineno: int, value: str) -> float:
        try:
            return float(value)
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: {key} must be a number, got {value!r}") from None

    kwargs: dict = {}
    thresholds: dict = {}
    for key, (lineno, value) in raw.items():
        if key in _FLOAT_KEYS:
            kwargs[key] = parse_float(key, lineno, value)
        elif key == "paper_faithful_final":
            word = value.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(
                    f"{path}: line {lineno}: paper_faithful_final must be true or false, got {value!r}"
                )
            kwargs[key] = _BOOL_WORDS[word]
        elif key.startswith(_THRESHOLD_PREFIX):
            name = key[len(_THRESHOLD_PREFIX):]
            if name not in CLASSIFIERS:
                raise ValueError(f"{path}: line {lineno}: unknown classifier in key {key!r}")
            thresholds[name] = parse_float(key, lineno, value)
        else:
            raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
    if thresholds:
        kwargs["classifier_thresholds"] = thresholds
    return FusionConfig(**kwargs)
