"""Synthetic bimodal question-answering task.

Each sample holds ``P`` pseudo-image feature vectors drawn around a class
prototype, a text prompt ``[BOS, question, arg, arg, ...]`` and an answer.
Even-numbered questions ask about the image (the answer is a function of the
class); odd-numbered questions are text-only (the answer is a function of the
prompt arguments).  Only answer tokens are scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TokenBatch

PAD, BOS, SEP = 0, 1, 2
QUESTION_BASE = 8
VALUE_BASE = 32


@dataclass
class SyntheticDataset:
    train: TokenBatch
    eval: TokenBatch
    prototypes: np.ndarray
    n_classes: int
    n_values: int

    def batches(self, batch_size: int, seed: int):
        """Endless stream of training mini-batches, reshuffled every epoch."""
        rng = np.random.default_rng(seed)
        n = self.train.batch_size
        while True:
            perm = rng.permutation(n)
            for lo in range(0, n - batch_size + 1, batch_size):
                yield self.train.subset(perm[lo : lo + batch_size])


def _answers(cls: np.ndarray, question: np.ndarray, args: np.ndarray, answer_len: int, n_values: int) -> np.ndarray:
    j = np.arange(answer_len)
    img = (cls[:, None] * (question[:, None] // 2 + 1) + 3 * j) % n_values
    txt = (args[:, :1] + (question[:, None] // 2 + 1) * j + args[:, 1:2] * (j > 0)) % n_values
    return np.where((question % 2 == 0)[:, None], img, txt)


def make_synthetic_dataset(
    seed: int,
    n_classes: int = 8,
    P: int = 16,
    prompt_len: int = 4,
    answer_len: int = 3,
    feature_dim: int = 32,
    n_questions: int = 4,
    n_values: int = 16,
    n_train: int = 2048,
    n_eval: int = 256,
    noise: float = 1.0,
) -> SyntheticDataset:
    """Deterministic, class-balanced train/eval splits for ``seed``."""
    if prompt_len < 3:
        raise ValueError("prompt_len must be at least 3 (BOS, question, argument)")
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, 1.0, (n_classes, feature_dim))
    patterns = rng.normal(0.0, 0.5, (P, feature_dim))

    def split(n):
        cls = np.arange(n) % n_classes
        rng.shuffle(cls)
        question = rng.integers(0, n_questions, n)
        args = rng.integers(0, n_values, (n, prompt_len - 2))
        image = prototypes[cls][:, None, :] + patterns[None] + rng.normal(0.0, noise, (n, P, feature_dim))
        ans = _answers(cls, question, np.pad(args, ((0, 0), (0, max(0, 2 - args.shape[1])))), answer_len, n_values)
        text = np.concatenate(
            [np.full((n, 1), BOS), QUESTION_BASE + question[:, None], VALUE_BASE + args, VALUE_BASE + ans], axis=1
        )
        mask = np.zeros(text.shape, dtype=bool)
        mask[:, prompt_len:] = True
        return TokenBatch(image, text.astype(np.int64), mask, cls)

    train = split(n_train)
    ev = split(n_eval)
    return SyntheticDataset(train, ev, prototypes, n_classes, n_values)


def sequence_targets(batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    """Whole-sequence (targets, mask): image positions carry PAD and are masked."""
    B, P = batch.batch_size, batch.image.shape[1]
    targets = np.concatenate([np.full((B, P), PAD), batch.text], axis=1)
    mask = np.concatenate([np.zeros((B, P), dtype=bool), batch.loss_mask], axis=1)
    return targets, mask


def image_question_mask(batch: TokenBatch) -> np.ndarray:
    return (batch.text[:, 1] - QUESTION_BASE) % 2 == 0
