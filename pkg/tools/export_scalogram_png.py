"""Render left/right scalogram images of a few epochs to PNG for eyeballing.

    python tools/export_scalogram_png.py --out runs/latest --epochs 0 5 12
"""
import argparse
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.neural import CLASS_NAMES  # noqa: E402
from services.scout import LEFT_REGIONS, RIGHT_REGIONS  # noqa: E402
from services.tensor_container import read_json, read_tensor  # noqa: E402


def render(left: np.ndarray, right: np.ndarray, freqs: list[float], title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axs = plt.subplots(2, 3, figsize=(10, 6), sharex=True, sharey=True)
    extent = [0, left.shape[1], freqs[-1], freqs[0]]
    for row, (image, names) in enumerate(((left, LEFT_REGIONS), (right, RIGHT_REGIONS))):
        for ch, name in enumerate(names):
            ax = axs[row, ch]
            ax.imshow(image[:, :, ch], cmap="jet", aspect="auto", vmin=0.0, vmax=1.0, extent=extent)
            ax.set_title(name, fontsize=9)
            if ch == 0:
                ax.set_ylabel("Hz")
    for ax in axs[-1]:
        ax.set_xlabel("sample")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/latest", help="Pipeline output root")
    ap.add_argument("--epochs", type=int, nargs="+", default=[0])
    ap.add_argument("--dest", default=None, help="PNG directory (default: <out>/cwt/png)")
    args = ap.parse_args()

    cwt = Path(args.out) / "cwt"
    left = read_tensor(cwt / "left.scwt", rank=4)
    right = read_tensor(cwt / "right.scwt", rank=4)
    index = read_json(cwt / "index.json")
    dest = Path(args.dest) if args.dest else cwt / "png"
    dest.mkdir(parents=True, exist_ok=True)

    for i in args.epochs:
        if not 0 <= i < left.shape[0]:
            print(f"[PNG][WARN] epoch {i} out of range (0..{left.shape[0] - 1})", file=sys.stderr)
            continue
        label = CLASS_NAMES[int(index["labels"][i])]
        title = f"epoch {index['ids'][i]} {index['subject_ids'][i]} {label}"
        path = dest / f"epoch_{i:05d}.png"
        render(left[i], right[i], index["pseudo_frequencies_hz"], title, path)
        print(f"[PNG] written {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
