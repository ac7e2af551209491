"""Synthetic caption corpora whose captions are recoverable from the features.

Each image draws one value per attribute slot (colour, animal, action,
place). Its feature vector is the normalised sum of fixed random directions
for those values plus a little noise, so a model can read the attributes off
the features. Optional "noise words" carry no feature signal; they make a
corpus that can only be memorised, which is what the overfitting and
thresholding experiments need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .textcorpus import Caption, CorpusRecord

SLOTS = {
    "colour": ["red", "blue", "green", "black", "white", "brown"],
    "animal": ["dog", "cat", "horse", "bird", "cow", "sheep"],
    "action": ["runs", "sits", "sleeps", "jumps", "stands"],
    "place": ["grass", "beach", "road", "snow", "field"],
}


@dataclass
class SyntheticTask:
    records: list[CorpusRecord]
    features: dict[str, np.ndarray]


def make_synthetic_task(
    n_images: int,
    dim: int = 64,
    seed: int = 0,
    noise_words: int = 0,
    noise_scale: float = 0.05,
    id_prefix: str = "img",
) -> SyntheticTask:
    """Captions read ``a <colour> <animal> <action> on the <place>``.

    With ``noise_words > 0`` each caption gains a trailing ``with <wN>`` where
    the word is drawn uniformly from ``noise_words`` fillers independent of
    the image.
    """
    rng = nc.make_rng(seed)
    directions = {
        slot: rng.standard_normal((len(values), dim)) / np.sqrt(dim) for slot, values in SLOTS.items()
    }
    records, features = [], {}
    for n in range(n_images):
        image_id = f"{id_prefix}{n:04d}"
        picks = {slot: int(rng.integers(len(values))) for slot, values in SLOTS.items()}
        w = SLOTS
        text = f"a {w['colour'][picks['colour']]} {w['animal'][picks['animal']]} {w['action'][picks['action']]} on the {w['place'][picks['place']]}"
        if noise_words:
            text += f" with w{int(rng.integers(noise_words))}"
        v = sum(directions[slot][i] for slot, i in picks.items()) + noise_scale * rng.standard_normal(dim)
        features[image_id] = v / np.linalg.norm(v)
        records.append(CorpusRecord(image_id, [Caption(text)]))
    return SyntheticTask(records, features)
