#!/usr/bin/env python3
"""Extract word vectors for the VOC category tokens from the wordllama wheel.

wordllama (MIT licensed) ships a 32000 x 256 float16 token-embedding table
(l2_supercat_256) together with its Llama-2 tokenizer. A word's vector is the
mean of its subword-token vectors, which is how wordllama itself pools text.

Usage:
    pip download --no-deps wordllama==0.4.0.post1 -d /tmp/wl
    python3 tools/extract_wordllama_vectors.py /tmp/wl/wordllama-*.whl \
        > data/embeddings/voc20_wordllama_l2_256.txt
"""
import json
import sys
import zipfile

import numpy as np
from tokenizers import Tokenizer

TOKENS = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "table", "dog", "horse", "motorbike", "person", "plant",
    "sheep", "sofa", "train", "television",
]


def main(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("wordllama/weights/l2_supercat_256.safetensors")
        tok_json = z.read("wordllama/tokenizers/l2_supercat_tokenizer_config.json")
    header_len = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8:8 + header_len])
    rows, dim = header["embedding.weight"]["shape"]
    table = np.frombuffer(raw[8 + header_len:], dtype=np.float16).reshape(rows, dim)
    tok = Tokenizer.from_str(tok_json.decode("utf-8"))
    for word in TOKENS:
        ids = tok.encode(word, add_special_tokens=False).ids
        vec = table[ids].astype(np.float64).mean(axis=0)
        print(word, " ".join(repr(float(v)) for v in vec))


if __name__ == "__main__":
    main(sys.argv[1])
