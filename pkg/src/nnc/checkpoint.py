"""Checkpoints: a directory of NPY arrays plus a JSON header.

Each named array (parameter, buffer, optimizer moment, queue storage) is
saved as `<name>.npy`.  The header records an architecture hash, the step
counter, and the RNG stream states, which together make a training run
resumable bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

HEADER_NAME = "header.json"


def architecture_hash(model, extra=""):
    """Stable digest of parameter/buffer names, shapes, dtypes + extras."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(f"{name}:{p.data.shape}:{p.data.dtype}".encode())
    for name, b in sorted(model.named_buffers()):
        h.update(f"{name}:{b.shape}:{b.dtype}".encode())
    h.update(str(extra).encode())
    return h.hexdigest()[:16]


def rng_state(gen):
    return gen.bit_generator.state


def restore_rng(gen, state):
    gen.bit_generator.state = state


def save_checkpoint(path, arrays, header):
    os.makedirs(path, exist_ok=True)
    for name, arr in arrays.items():
        np.save(os.path.join(path, name + ".npy"), arr)
    with open(os.path.join(path, HEADER_NAME), "w") as f:
        json.dump(header, f, indent=1, default=int)


def load_checkpoint(path):
    with open(os.path.join(path, HEADER_NAME)) as f:
        header = json.load(f)
    arrays = {}
    for fname in sorted(os.listdir(path)):
        if fname.endswith(".npy"):
            arrays[fname[:-4]] = np.load(os.path.join(path, fname))
    return arrays, header


def split_prefix(arrays, prefix):
    """Sub-dict of arrays under `prefix.`, with the prefix stripped."""
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
