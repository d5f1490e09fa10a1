"""Write frozen encoder token embeddings for a SQuAD file in BEMB format.

Examples are featurized with the same tokenizer the trainer uses, so each
record has exactly ``valid_len`` rows. A subword encoder sees every word as
its own pieces and the piece vectors of a word are averaged back onto it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import _spanqa

DEFAULT_MODEL = "bert-base-uncased"
SPECIAL = {"[CLS]", "[SEP]", "[PAD]"}


class Encoder(Protocol):
    hidden: int

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        """Return a len(tokens) x hidden float32 array."""


class HashEncoder:
    """Deterministic stand-in that needs no weights: a unit vector per token
    string plus a small position term."""

    def __init__(self, hidden: int = 768, seed: int = 0):
        self.hidden = hidden
        self.seed = seed

    def _token(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.hidden)
        return v / np.linalg.norm(v)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        pos = np.arange(len(tokens))[:, None]
        freq = np.exp(-np.log(10000.0) * (np.arange(self.hidden) // 2 * 2) / self.hidden)
        angle = pos * freq[None, :]
        position = np.where(np.arange(self.hidden) % 2 == 0, np.sin(angle), np.cos(angle))
        position *= 0.1 / np.sqrt(self.hidden / 2)
        rows = np.stack([self._token(t) for t in tokens]) + position
        return rows.astype(np.float32)


class TransformerEncoder:
    """Final-layer states of a pretrained encoder, inference only."""

    def __init__(self, model_id: str = DEFAULT_MODEL):
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id).eval()
        self.hidden = int(self.model.config.hidden_size)
        self.limit = int(getattr(self.model.config, "max_position_embeddings", 512))

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        tok = self.tokenizer
        ids: list[int] = []
        owner: list[int] = []
        for i, t in enumerate(tokens):
            if t == "[CLS]":
                pieces = [tok.cls_token_id]
            elif t == "[SEP]":
                pieces = [tok.sep_token_id]
            else:
                pieces = tok.convert_tokens_to_ids(tok.tokenize(t)) or [tok.unk_token_id]
            ids.extend(pieces)
            owner.extend([i] * len(pieces))
        if len(ids) > self.limit:
            raise ValueError(f"{len(ids)} subword pieces exceed the encoder limit of {self.limit}")
        with self._torch.no_grad():
            out = self.model(input_ids=self._torch.tensor([ids])).last_hidden_state[0].numpy()
        rows = np.zeros((len(tokens), self.hidden), dtype=np.float64)
        counts = np.zeros(len(tokens))
        np.add.at(rows, owner, out)
        np.add.at(counts, owner, 1)
        return (rows / counts[:, None]).astype(np.float32)


@dataclasses.dataclass
class ExportManifest:
    model: str
    hidden: int
    max_seq_len: int
    qids: list[str]
    sha256: str
    errors: dict[str, str] = dataclasses.field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def manifest_path(out_path: Path | str) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.name + ".manifest.json")


def export(
    squad_json: Path | str,
    out_path: Path | str,
    model_id: str = DEFAULT_MODEL,
    max_seq_len: int = 384,
    encoder: Encoder | None = None,
) -> ExportManifest:
    """One record per featurizable example, in file order. Examples that
    cannot be featurized or encoded are listed in the manifest's errors."""
    if encoder is None:
        encoder = HashEncoder() if model_id.startswith("hash:") else TransformerEncoder(model_id)
    examples = _spanqa.load_squad_file(str(squad_json))
    qids: list[str] = []
    errors: dict[str, str] = {}
    with _spanqa.BembWriter(str(out_path), encoder.hidden) as writer:
        for ex in examples:
            try:
                feature = _spanqa.featurize(ex, max_seq_len, training=False)
                rows = encoder.encode(feature.tokens[: feature.valid_len])
            except (_spanqa.SpanqaError, ValueError) as err:
                errors[ex.qid] = str(err)
                continue
            if rows.shape != (feature.valid_len, encoder.hidden) or not np.isfinite(rows).all():
                errors[ex.qid] = f"encoder returned {rows.shape} rows with non-finite values or wrong shape"
                continue
            writer.write(ex.qid, rows)
            qids.append(ex.qid)
    digest = hashlib.sha256(Path(out_path).read_bytes()).hexdigest()
    manifest = ExportManifest(model_id, encoder.hidden, max_seq_len, qids, digest, errors)
    manifest_path(out_path).write_text(manifest.to_json())
    return manifest


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="spanqa-embed")
    sub = parser.add_subparsers(dest="command", required=True)
    exp = sub.add_parser("export", help="write BEMB token embeddings for a SQuAD file")
    exp.add_argument("--squad", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--model", default=DEFAULT_MODEL, help="pretrained model id, or hash:H for the offline stand-in")
    exp.add_argument("--max-seq-len", type=int, default=384)
    args = parser.parse_args(argv)

    encoder = None
    if args.model.startswith("hash:"):
        encoder = HashEncoder(int(args.model.split(":", 1)[1] or 768))
    manifest = export(args.squad, args.out, args.model, args.max_seq_len, encoder)
    print(json.dumps({"out": args.out, "records": len(manifest.qids), "hidden": manifest.hidden,
                      "errors": len(manifest.errors)}))
    for qid, msg in manifest.errors.items():
        print(f"{qid}: {msg}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
