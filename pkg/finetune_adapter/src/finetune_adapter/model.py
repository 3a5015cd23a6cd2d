"""Toy character-level causal language model and its batch encoding.

Small on purpose: the adapter exists to validate the data contract and the
loss-masking semantics on commodity CPUs, not to produce a useful model.
Each training example is encoded as ``prompt .. response <eos>``; only the
positions whose prediction target lies in the response span carry loss
weight, and a loss-masked row zeroes those weights too, so its response
tokens contribute exactly nothing to the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

PAD = 0
EOS = 1
_SPECIALS = 2


class CharVocab:
    def __init__(self, texts: list[str]):
        chars = sorted({ch for text in texts for ch in text})
        self._index = {ch: i + _SPECIALS for i, ch in enumerate(chars)}

    def __len__(self) -> int:
        return len(self._index) + _SPECIALS

    def encode(self, text: str) -> list[int]:
        # Unknown characters should be impossible when the vocab was built
        # from the same rows; fail loudly if the assumption breaks.
        return [self._index[ch] for ch in text]


class TinyCausalLM(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int = 32, hidden_dim: int = 64):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD)
        self.rnn = nn.GRU(embed_dim, hidden_dim, batch_first=True)
        self.head = nn.Linear(hidden_dim, vocab_size)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        out, _ = self.rnn(self.embed(tokens))
        return self.head(out)


@dataclass
class Batch:
    tokens: torch.Tensor   # (B, T) input ids
    targets: torch.Tensor  # (B, T) next-token ids, PAD beyond the sequence
    weights: torch.Tensor  # (B, T) 1.0 where the target is an unmasked response token


def encode_batch(rows, vocab: CharVocab, max_len: int = 512) -> Batch:
    """Encode rows into next-token-prediction tensors with loss weights."""
    sequences = []
    for row in rows:
        prompt_ids = vocab.encode(row.prompt)
        response_ids = vocab.encode(row.response) + [EOS]
        ids = (prompt_ids + response_ids)[:max_len]
        response_start = min(len(prompt_ids), len(ids))
        sequences.append((ids, response_start, row.loss_masked))
    width = max(len(ids) for ids, _, _ in sequences)
    tokens = torch.full((len(sequences), width - 1), PAD, dtype=torch.long)
    targets = torch.full((len(sequences), width - 1), PAD, dtype=torch.long)
    weights = torch.zeros((len(sequences), width - 1))
    for b, (ids, response_start, masked) in enumerate(sequences):
        seq = torch.tensor(ids, dtype=torch.long)
        tokens[b, : len(ids) - 1] = seq[:-1]
        targets[b, : len(ids) - 1] = seq[1:]
        if not masked:
            # Position t predicts ids[t+1]; response targets start one
            # position earlier.
            weights[b, max(response_start - 1, 0) : len(ids) - 1] = 1.0
    return Batch(tokens=tokens, targets=targets, weights=weights)


def masked_loss(logits: torch.Tensor, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean loss over weighted tokens, summed loss). Both are exactly zero
    for a batch whose rows are all loss-masked."""
    per_token = nn.functional.cross_entropy(
        logits.reshape(-1, logits.size(-1)), batch.targets.reshape(-1), reduction="none"
    ).reshape(batch.targets.shape)
    weighted = per_token * batch.weights
    total = weighted.sum()
    count = batch.weights.sum()
    mean = total / count if count > 0 else total
    return mean, total
