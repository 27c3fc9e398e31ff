"""Hashed-token text embeddings with a learned null token."""

from __future__ import annotations

import re
import zlib

import torch
from torch import nn

NULL_ID = 0
PAD_ID = 1
_FIRST_WORD_ID = 2


def tokenize(prompt: str, vocab: int, max_len: int) -> list[int]:
    words = re.findall(r"[a-z0-9]+", prompt.lower())
    if not words:
        return [NULL_ID]
    ids = [_FIRST_WORD_ID + zlib.crc32(w.encode()) % (vocab - _FIRST_WORD_ID) for w in words]
    return ids[:max_len]


class TextEmbedder(nn.Module):
    def __init__(self, vocab: int = 4096, width: int = 128, max_len: int = 16):
        super().__init__()
        self.vocab, self.max_len = vocab, max_len
        self.tokens = nn.Embedding(vocab, width)
        self.positions = nn.Embedding(max_len, width)
        nn.init.normal_(self.tokens.weight, std=1.0)
        nn.init.normal_(self.positions.weight, std=0.1)

    def embed_text(self, prompt: str) -> torch.Tensor:
        """(L, width); the empty prompt maps to the single null token."""
        ids = torch.tensor(tokenize(prompt, self.vocab, self.max_len), device=self.tokens.weight.device)
        return self.tokens(ids) + self.positions(torch.arange(len(ids), device=ids.device))

    def forward(self, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Batch of prompts -> (B, L, width) embeddings and (B, L) validity mask."""
        seqs = [tokenize(p, self.vocab, self.max_len) for p in prompts]
        L = max(len(s) for s in seqs)
        dev = self.tokens.weight.device
        ids = torch.full((len(seqs), L), PAD_ID, dtype=torch.long, device=dev)
        mask = torch.zeros((len(seqs), L), dtype=torch.bool, device=dev)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = torch.tensor(s, device=dev)
            mask[i, :len(s)] = True
        emb = self.tokens(ids) + self.positions(torch.arange(L, device=dev))[None]
        return emb, mask
