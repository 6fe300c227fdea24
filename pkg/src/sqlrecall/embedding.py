"""Text embedders: a weight-free hashing embedder and an HTTP embedding client."""

from __future__ import annotations

import hashlib
import json
import os
import re
from typing import Protocol, Sequence

import numpy as np
import requests

from .errors import BackendError

_WORD_RE = re.compile(r"[a-z0-9]+")


class Embedder(Protocol):
    dim: int

    @property
    def fingerprint(self) -> str: ...

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((a * b).sum()) / (na * nb)


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


class HashingEmbedder:
    """Bag of word tokens and character n-grams hashed into ``dim`` buckets.

    Deterministic across processes and platforms, so it doubles as the test
    embedder and as a fallback when no embedding service is available.
    """

    def __init__(self, dim: int = 512, ngram: int = 3) -> None:
        self.dim = dim
        self.ngram = ngram

    @property
    def fingerprint(self) -> str:
        return f"hashing-ngram:dim={self.dim}:n={self.ngram}"

    def _features(self, text: str) -> list[str]:
        feats = []
        for word in _WORD_RE.findall(text.lower()):
            feats.append("w:" + word)
            padded = f"#{word}#"
            if len(padded) <= self.ngram:
                feats.append("g:" + padded)
            else:
                feats.extend("g:" + padded[i : i + self.ngram] for i in range(len(padded) - self.ngram + 1))
        # punctuation matters for SQL skeletons, e.g. "( * )" or "> _"
        feats.extend("p:" + ch for ch in text if not ch.isalnum() and not ch.isspace())
        return feats

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for feat in self._features(text):
                out[row, _stable_hash(feat) % self.dim] += 1.0
        return out


class RemoteEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        api_key_env: str = "SQLRECALL_API_KEY",
        timeout_s: float = 60.0,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    @property
    def fingerprint(self) -> str:
        return f"remote:{self.model}:dim={self.dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                f"{self.endpoint}/embeddings",
                data=json.dumps({"model": self.model, "input": list(texts)}),
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise BackendError(f"embedding request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendError(resp.text[:500], status=resp.status_code)
        data = sorted(resp.json()["data"], key=lambda d: d["index"])
        arr = np.asarray([d["embedding"] for d in data], dtype=np.float64)
        if arr.shape != (len(texts), self.dim):
            raise BackendError(f"embedding shape {arr.shape} does not match dim {self.dim}")
        return arr
