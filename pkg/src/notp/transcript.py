"""Captured wire transcripts and their ground-truth sidecars.

A transcript is the raw concatenation of frames as they crossed the wire.
The truth sidecar is a JSON document written only by test harnesses; it
holds what the producer knew (fresh bits, bases, selector) so attacks can be
scored without touching live session state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .keys import pack_bits, unpack_bits
from .net import FrameType, HelloPayload, decode_batch, decode_stream
from .physics import NoiseParams
from .protocol import Batch, EmissionTruth

TRUTH_VERSION = 1


class TranscriptError(ValueError):
    pass


@dataclass
class Transcript:
    hello: HelloPayload
    batches: list[Batch]

    def params(self, guard_ratio: float = 5.0) -> NoiseParams:
        return self.hello.params(guard_ratio)


def parse_transcript(data: bytes) -> Transcript:
    """Extract the handshake and every non-empty batch, in wire order."""
    frames = decode_stream(data)
    hello = None
    batches = []
    for f in frames:
        if f.type is FrameType.HELLO and hello is None:
            hello = HelloPayload.decode(f.payload)
        elif f.type is FrameType.BATCH:
            b = decode_batch(f.payload, hello.adc_bits if hello else 16)
            if len(b):
                batches.append(b)
    if hello is None:
        raise TranscriptError("transcript has no HELLO frame")
    return Transcript(hello, batches)


def read_transcript(path) -> Transcript:
    return parse_transcript(Path(path).read_bytes())


@dataclass
class TruthRecord:
    cycle: int
    producer: str
    fresh: np.ndarray
    data: np.ndarray
    bases: np.ndarray
    selector: int | None


def _hex(bits) -> str:
    return pack_bits(bits).hex()


def truth_document(entries: Sequence[tuple[str, EmissionTruth]], params: NoiseParams,
                   n_b: int, list_seed: bytes) -> dict:
    return {
        "version": TRUTH_VERSION,
        "params": {"n_mean": params.mean_photon_number, "delta_phi": params.delta_phi,
                   "adc_bits": params.adc_bits, "guard": params.guard_ratio},
        "n_b": n_b,
        "list_seed": list_seed.hex(),
        "batches": [
            {"cycle": t.cycle, "producer": who, "count": int(t.fresh.size), "fresh": _hex(t.fresh),
             "data": _hex(t.data), "bases": _hex(t.bases), "selector": t.selector}
            for who, t in sorted(entries, key=lambda e: e[1].cycle)
        ],
    }


def write_truth(path, document: dict) -> None:
    Path(path).write_text(json.dumps(document, indent=1) + "\n")


def read_truth(path) -> tuple[dict, list[TruthRecord]]:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != TRUTH_VERSION:
            raise TranscriptError("unsupported truth sidecar version")
        records = []
        for b in doc["batches"]:
            n = int(b["count"])
            records.append(TruthRecord(int(b["cycle"]), b["producer"],
                                       unpack_bits(bytes.fromhex(b["fresh"]), n),
                                       unpack_bits(bytes.fromhex(b["data"]), n),
                                       unpack_bits(bytes.fromhex(b["bases"]), n),
                                       b["selector"]))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, TranscriptError):
            raise
        raise TranscriptError(f"malformed truth sidecar: {exc}") from exc
    return doc, records


def match_truth(transcript: Transcript, records: Sequence[TruthRecord]) -> None:
    """Raise unless the sidecar describes exactly the batches in the transcript."""
    if len(records) != len(transcript.batches):
        raise TranscriptError(f"transcript has {len(transcript.batches)} batches, truth has {len(records)}")
    for b, r in zip(transcript.batches, records):
        if b.cycle != r.cycle or len(b) != r.fresh.size:
            raise TranscriptError(f"truth for cycle {r.cycle} does not match the transcript")
