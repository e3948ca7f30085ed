#!/usr/bin/env python3
"""Convert extracted WiSig-style arrays into an RFIQ file for modeforge.

Input: an .npz with
  x  float array (n_frames, frame_len, 2), in-phase then quadrature
  y  int array (n_frames,) of transmitter indices 0..K-1
  names  optional string array (K,) of transmitter names

Downloading and slicing the original dataset is out of scope; export the
equalized preamble frames to the layout above first.
"""

import argparse
import json
import struct
import sys

import numpy as np


def write_rfiq(path, x, y, names, sample_rate, symbol_rate):
    n, length, channels = x.shape
    header = {
        "frame_len": int(length),
        "n_frames": int(n),
        "n_classes": len(names),
        "channels": int(channels),
        "sample_rate": float(sample_rate),
        "symbol_rate": float(symbol_rate),
        "layout": "raw_iq",
        "class_names": list(names),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(b"RFIQ")
        f.write(struct.pack("<HI", 1, len(blob)))
        f.write(blob)
        f.write(y.astype("<u2").tobytes())
        f.write(x.astype("<f4").tobytes())


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("npz")
    p.add_argument("out")
    p.add_argument("--sample-rate", type=float, default=25e6)
    p.add_argument("--symbol-rate", type=float, default=2e6)
    a = p.parse_args(argv)

    data = np.load(a.npz)
    x = np.asarray(data["x"])
    y = np.asarray(data["y"]).astype(np.int64)
    if x.ndim != 3 or x.shape[2] != 2:
        sys.exit(f"x must be (n_frames, frame_len, 2), got {x.shape}")
    if y.shape != (x.shape[0],):
        sys.exit(f"y must hold one label per frame, got {y.shape}")
    k = int(y.max()) + 1 if y.size else 0
    names = [str(s) for s in data["names"]] if "names" in data else [f"tx{i:02d}" for i in range(k)]
    if y.size and (y.min() < 0 or y.max() >= len(names)):
        sys.exit("labels must lie in 0..len(names)-1")
    if len(names) > 65535:
        sys.exit("at most 65535 transmitters fit the u16 label field")
    write_rfiq(a.out, x, y, names, a.sample_rate, a.symbol_rate)
    print(f"wrote {x.shape[0]} frames x {x.shape[1]} samples, {len(names)} transmitters to {a.out}")


if __name__ == "__main__":
    main()
