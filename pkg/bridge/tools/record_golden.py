#!/usr/bin/env python3
"""Record the golden protocol transcript fixture.

Builds the pinned toy encoder snapshot, replays the canonical
hello/info/encode/vjp exchange against the micro model, and writes the raw
request+reply bytes to tests/golden/transcript.bin. Future server versions
must reproduce these bytes exactly.
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from anchorattack.containers import write_snapshot
from anchorattack.encoder import init_encoder

from vebridge.models import load_model

from conftest import GOLDEN_DIR, TOY_CONFIG
from test_conformance import _run_transcript


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        snapshot = Path(tmp) / "toy.aenc"
        write_snapshot(snapshot, init_encoder(TOY_CONFIG))
        transcript = _run_transcript(load_model(f"micro:{snapshot}"))
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
    out = GOLDEN_DIR / "transcript.bin"
    out.write_bytes(transcript)
    print(f"wrote {len(transcript)} bytes to {out}")


if __name__ == "__main__":
    main()
