"""Supervised fine-tuning loop honoring per-row loss masks.

Defaults mirror the published recipe scaled to toy size: AdamW with betas
(0.9, 0.95), learning rate warming up to 1e-4 and then rising linearly to
3e-4 by the final step (warmup 300 / 700 total at paper scale; pass smaller
values for toys). Weight decay stays 0 so a zero-gradient step is exactly a
no-op, which is what makes the masking property testable.

Before training, the loop proves the mask on the data it was given: the
summed response-token loss over a batch of only loss-masked rows must be
exactly zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .data import TrainingRow, load_rows
from .model import CharVocab, TinyCausalLM, encode_batch, masked_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 700
    warmup_steps: int = 300
    lr_initial: float = 1e-4
    lr_final: float = 3e-4
    batch_size: int = 8
    embed_dim: int = 32
    hidden_dim: int = 64
    max_len: int = 512
    seed: int = 0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_initial, then linear ramp to lr_final."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_initial * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr_initial + (cfg.lr_final - cfg.lr_initial) * frac


def verify_masking(model: TinyCausalLM, rows: list[TrainingRow], vocab: CharVocab,
                   max_len: int) -> None:
    """Assert that a masked-only batch contributes exactly zero loss."""
    masked = [r for r in rows if r.loss_masked]
    if not masked:
        log.info("no loss-masked rows in this dataset; mask check skipped")
        return
    batch = encode_batch(masked, vocab, max_len=max_len)
    with torch.no_grad():
        _, total = masked_loss(model(batch.tokens), batch)
    if total.item() != 0.0:
        raise AssertionError(f"masked-only batch produced loss {total.item()}")
    log.info("mask verified: %d masked rows contribute zero loss", len(masked))


def train(rows: list[TrainingRow], cfg: TrainConfig, out_dir: str | Path) -> Path:
    """Run the fine-tune; returns the checkpoint path.

    Writes checkpoint.pt and training_log.json (per-step loss and learning
    rate) into ``out_dir``. Aborts on divergence (non-finite loss).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)

    vocab = CharVocab([r.prompt + r.response for r in rows])
    model = TinyCausalLM(len(vocab), embed_dim=cfg.embed_dim, hidden_dim=cfg.hidden_dim)
    verify_masking(model, rows, vocab, cfg.max_len)

    trainable = [r for r in rows if not r.loss_masked]
    if not trainable:
        raise ValueError("every row is loss-masked; nothing to train on")
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr_initial, betas=(0.9, 0.95), weight_decay=0.0
    )
    history = []
    for step in range(cfg.steps):
        lr = lr_at(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch_rows = [trainable[rng.randrange(len(trainable))] for _ in range(cfg.batch_size)]
        batch = encode_batch(batch_rows, vocab, max_len=cfg.max_len)
        mean, _ = masked_loss(model(batch.tokens), batch)
        if not math.isfinite(mean.item()):
            raise TrainingDiverged(f"loss became {mean.item()} at step {step}")
        optimizer.zero_grad()
        mean.backward()
        optimizer.step()
        history.append({"step": step, "loss": mean.item(), "lr": lr})
        if step % 50 == 0:
            log.info("step %d: loss %.4f (lr %.2e)", step, mean.item(), lr)

    checkpoint = out_dir / "checkpoint.pt"
    torch.save(
        {"model_state": model.state_dict(), "config": asdict(cfg), "vocab_size": len(vocab)},
        checkpoint,
    )
    (out_dir / "training_log.json").write_text(
        json.dumps({"config": asdict(cfg), "steps": history}, indent=2) + "\n",
        encoding="utf-8",
    )
    return checkpoint


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Fine-tune a toy model on confidence-annotated instruction data."
    )
    parser.add_argument("--data", required=True, help="instruction.jsonl from the probing pipeline")
    parser.add_argument("--out", required=True, help="checkpoint output directory")
    parser.add_argument("--steps", type=int, default=700)
    parser.add_argument("--warmup", type=int, default=300)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--lr-initial", type=float, default=1e-4)
    parser.add_argument("--lr-final", type=float, default=3e-4)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")

    rows, cases = load_rows(args.data)
    log.info("loaded %d rows: %s", len(rows), dict(sorted(cases.items())))
    cfg = TrainConfig(
        steps=args.steps, warmup_steps=args.warmup, batch_size=args.batch_size,
        lr_initial=args.lr_initial, lr_final=args.lr_final, seed=args.seed,
    )
    checkpoint = train(rows, cfg, args.out)
    print(checkpoint)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
