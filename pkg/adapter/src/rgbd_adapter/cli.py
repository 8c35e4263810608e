"""Command line: export a posed RGB-D dataset to the engine stream format."""
from __future__ import annotations

import argparse
import json
import sys

from .export import AdapterConfig, export_stream


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rgbd-adapter",
        description="Convert a posed RGB-D dataset into a voxfuse frame stream.",
    )
    parser.add_argument("dataset", help="dataset root directory")
    parser.add_argument("--out", required=True, help="output stream path")
    parser.add_argument("--prompts", help="output prompt file path")
    parser.add_argument("--encoder-profile", default="stub-hash")
    parser.add_argument("--segmenter", default="stub-full")
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--patch-size", type=int, default=16)
    parser.add_argument("--crop-padding", type=float, default=0.05)
    args = parser.parse_args(argv)

    config = AdapterConfig(
        dataset_root=args.dataset,
        output_stream=args.out,
        output_prompts=args.prompts,
        encoder_profile=args.encoder_profile,
        segmenter_profile=args.segmenter,
        embedding_dim=args.dim,
        patch_size=args.patch_size,
        crop_padding_frac=args.crop_padding,
    )
    try:
        summary = export_stream(config)
    except (OSError, ValueError, KeyError) as e:
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    print(json.dumps({
        "frames": summary.frames,
        "segments": summary.segments,
        "labels": summary.labels,
        "stream": summary.stream_path,
        "prompts": summary.prompts_path,
    }))
    return 0


if __name__ == "__main__":
    sys.exit(main())
