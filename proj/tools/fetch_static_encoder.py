#!/usr/bin/env python3
"""Fetch the WordLlama static token-embedding model and convert it for cbllm.

Writes <cache>/encoders/<name>/embeddings.emb (EMB1, float32) and
tokenizer.json, where <cache> is $CBLLM_CACHE or ~/.cache/cbllm.

The wheel is fetched with pip (no dependencies). Pass --wheel to convert a
wheel that is already on disk.
"""

import argparse
import hashlib
import json
import os
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

PACKAGE = "wordllama==0.4.0.post1"
WEIGHTS = "wordllama/weights/l2_supercat_256.safetensors"
TOKENIZER = "wordllama/tokenizers/l2_supercat_tokenizer_config.json"
DEFAULT_NAME = "wordllama-l2-256"


def cache_dir():
    env = os.environ.get("CBLLM_CACHE")
    if env:
        return pathlib.Path(env)
    return pathlib.Path.home() / ".cache" / "cbllm"


def read_safetensor(blob, key):
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + hlen])
    meta = header[key]
    dtype = {"F16": np.float16, "F32": np.float32, "BF16": None}[meta["dtype"]]
    if dtype is None:
        raise SystemExit("bf16 tensors are not supported")
    start, end = meta["data_offsets"]
    raw = blob[8 + hlen + start : 8 + hlen + end]
    return np.frombuffer(raw, dtype=dtype).reshape(meta["shape"])


def write_emb1(path, matrix, source_id):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    rows, dim = matrix.shape
    with open(path, "wb") as f:
        f.write(b"EMB1")
        f.write(struct.pack("<III", rows, dim, 0))
        f.write(hashlib.sha256(source_id.encode()).digest())
        f.write(bytes(32))
        f.write(matrix.tobytes())


def fetch_wheel(dest):
    subprocess.check_call(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
         "-d", str(dest), PACKAGE])
    wheels = sorted(pathlib.Path(dest).glob("wordllama-*.whl"))
    if not wheels:
        raise SystemExit("pip did not produce a wordllama wheel")
    return wheels[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel", type=pathlib.Path, help="use this wheel instead of downloading")
    ap.add_argument("--name", default=DEFAULT_NAME)
    ap.add_argument("--out", type=pathlib.Path, help="output directory (default: cache)")
    args = ap.parse_args()

    out = args.out or cache_dir() / "encoders" / args.name
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        with zipfile.ZipFile(wheel) as z:
            weights = z.read(WEIGHTS)
            tokenizer = z.read(TOKENIZER)
    table = read_safetensor(weights, "embedding.weight").astype(np.float32)
    write_emb1(out / "embeddings.emb", table, args.name)
    (out / "tokenizer.json").write_bytes(tokenizer)
    meta = {
        "name": args.name,
        "package": PACKAGE,
        "rows": int(table.shape[0]),
        "dim": int(table.shape[1]),
        "weights_sha256": hashlib.sha256(weights).hexdigest(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {out} ({table.shape[0]} x {table.shape[1]})")


if __name__ == "__main__":
    main()
