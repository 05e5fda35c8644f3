"""Convert the widely shared AdaIN PyTorch checkpoints to splatstyle weight files.

    python tools/convert_vgg.py vgg_normalised.pth decoder.pth --out weights/

Needs torch to unpickle the checkpoints; the package itself does not.
"""
import argparse
from pathlib import Path

import numpy as np

from splatstyle.sceneio import save_weights
from splatstyle.stylizer import VGG19_RELU4, convert_sequential_decoder, convert_sequential_vgg


def _state(path):
    import torch

    state = torch.load(path, map_location="cpu")
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("encoder", help="sequential VGG state dict (with the leading 1x1 colour conv)")
    ap.add_argument("decoder", nargs="?", help="sequential decoder state dict")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"arch": VGG19_RELU4.to_dict(), "source": Path(args.encoder).name}
    save_weights(out / "encoder", convert_sequential_vgg(_state(args.encoder)), {**meta, "kind": "encoder"})
    if args.decoder:
        # the published decoder upsamples, so it matches the pooled encoder
        save_weights(out / "decoder", convert_sequential_decoder(_state(args.decoder)),
                     {**meta, "source": Path(args.decoder).name, "kind": "decoder", "mode": "pooled"})


if __name__ == "__main__":
    main()
