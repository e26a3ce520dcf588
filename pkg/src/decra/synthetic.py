"""Bundled synthetic benchmark: class keywords embedded in templated sentences.

Each class owns a pool of keywords drawn with Zipf-like weights, so a small
training subset sees the frequent keywords of a class but only a few of its
rare ones.  Keywords of one class co-occur within a sentence, which gives a
masked language model something label-correlated to learn.  Distractor
clauses, shared adjectives and occasional cross-class keywords keep the task
from being trivially separable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .streams import Purpose, stream

FUNCTION_NOUNS = ("movie", "story", "film", "plot", "cast", "ending", "script", "scene",
                  "show", "book", "music", "actor", "idea", "day", "place", "meal",
                  "trip", "team", "game", "song")
VERBS = ("found", "thought", "called", "saw", "felt", "watched", "named", "rated")
ADVERBS = ("very", "quite", "really", "so", "rather", "truly")
ADJECTIVES = ("long", "short", "new", "old", "big", "small", "late", "early")
CLASS_KEYWORDS = (
    ("great", "superb", "lovely", "brilliant", "wonderful", "charming", "delightful",
     "splendid", "joyful", "radiant"),
    ("awful", "dreadful", "terrible", "horrid", "dismal", "lousy", "tedious",
     "clumsy", "painful", "grim"),
    ("scary", "creepy", "eerie", "tense", "chilling", "spooky", "sinister",
     "haunting", "menacing", "ghastly"),
    ("funny", "silly", "witty", "goofy", "comic", "quirky", "zany", "cheeky",
     "jolly", "wacky"),
    ("sad", "tearful", "gloomy", "mournful", "somber", "tragic", "bleak",
     "wistful", "forlorn", "weepy"),
    ("smart", "clever", "wise", "deep", "subtle", "profound", "astute", "shrewd",
     "lucid", "insightful"),
)

# label-correlated modifiers placed right before a keyword
CLASS_CUES = (
    ("simply", "warmly", "gladly"),
    ("utterly", "sorely", "badly"),
    ("darkly", "oddly", "coldly"),
    ("wildly", "merrily", "loudly"),
    ("softly", "quietly", "heavily"),
    ("keenly", "finely", "calmly"),
)

KEYWORD_TEMPLATES = (
    "the {noun} was {cue} {kw}",
    "i {verb} this {noun} {cue} {kw}",
    "it is {adj} and {cue} {kw}",
    "a {cue} {kw} {noun} with a {adj} {noun}",
    "they {verb} the {noun} {cue} {kw}",
)
FILLER_TEMPLATES = (
    "we {verb} the {noun} on a {adj} day",
    "the {noun} of the {noun} is {adj}",
    "it has a {adj} {noun}",
    "there is a {noun} in the {noun}",
)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    per_class: int = 500
    keyword_clauses: tuple = (2, 3)
    filler_clauses: tuple = (0, 1)
    cross_class_rate: float = 0.1
    cue_rate: float = 0.5
    zipf_exponent: float = 1.1
    seed: int = 0


def _keyword_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate(spec: SyntheticSpec, split: int = 0) -> list[dict]:
    """Return ``per_class * num_classes`` rows of ``{"text", "label"}``.

    ``split`` selects an independent stream, so train and test files drawn
    from the same spec are disjoint samples of one distribution.
    """
    if not 2 <= spec.num_classes <= len(CLASS_KEYWORDS):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_KEYWORDS)}]")
    rng = stream(spec.seed, Purpose.SYNTH, split)
    weights = _keyword_weights(len(CLASS_KEYWORDS[0]), spec.zipf_exponent)
    rows = []
    for i in range(spec.per_class * spec.num_classes):
        label = i % spec.num_classes
        n_kw = int(rng.integers(spec.keyword_clauses[0], spec.keyword_clauses[1] + 1))
        n_fill = int(rng.integers(spec.filler_clauses[0], spec.filler_clauses[1] + 1))
        clauses = []
        for _ in range(n_kw):
            owner = label
            if rng.random() < spec.cross_class_rate:
                owner = int(rng.integers(spec.num_classes))
            kw = CLASS_KEYWORDS[owner][rng.choice(len(weights), p=weights)]
            cue = None
            if rng.random() < spec.cue_rate:
                cue = CLASS_CUES[owner][rng.integers(len(CLASS_CUES[owner]))]
            template = KEYWORD_TEMPLATES[rng.integers(len(KEYWORD_TEMPLATES))]
            clauses.append(_fill(template, rng, kw, cue))
        for _ in range(n_fill):
            template = FILLER_TEMPLATES[rng.integers(len(FILLER_TEMPLATES))]
            clauses.append(_fill(template, rng))
        order = rng.permutation(len(clauses))
        rows.append({"text": " and ".join(clauses[j] for j in order), "label": f"c{label}"})
    perm = rng.permutation(len(rows))
    return [rows[j] for j in perm]


def _fill(template: str, rng: np.random.Generator, kw: str | None = None,
          cue: str | None = None) -> str:
    out = []
    for tok in template.split():
        if tok == "{noun}":
            out.append(FUNCTION_NOUNS[rng.integers(len(FUNCTION_NOUNS))])
        elif tok == "{verb}":
            out.append(VERBS[rng.integers(len(VERBS))])
        elif tok == "{adv}" or (tok == "{cue}" and cue is None):
            out.append(ADVERBS[rng.integers(len(ADVERBS))])
        elif tok == "{cue}":
            out.append(cue)
        elif tok == "{adj}":
            out.append(ADJECTIVES[rng.integers(len(ADJECTIVES))])
        elif tok == "{kw}":
            out.append(kw)
        else:
            out.append(tok)
    return " ".join(out)
