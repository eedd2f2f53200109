"""piaa-extract: image folder + class names -> PIAA embedding/prototype files."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .extract import ExtractError, ExtractJob, extract


def _read_class_names(value: str) -> list[str]:
    path = Path(value)
    if path.is_file():
        names = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    else:
        names = [s.strip() for s in value.split(",") if s.strip()]
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="piaa-extract",
        description="Encode an image folder and class-name list into PIAA files.",
    )
    parser.add_argument("--images", required=True, help="image folder (recursive)")
    parser.add_argument("--class-names", required=True,
                        help="comma-separated names or a file with one name per line")
    parser.add_argument("--template", action="append", default=None,
                        help='prompt template, e.g. "a photo of a {}"; repeat the '
                             "flag to ensemble several templates per class")
    parser.add_argument("--encoder", default="clip:openai/clip-vit-base-patch16",
                        help='encoder id: "clip:<hf-model>" or "toy[:dim]"')
    parser.add_argument("--out-embeddings", required=True)
    parser.add_argument("--out-prototypes", required=True)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--skip-log", default=None,
                        help="sidecar JSONL for skipped images "
                             "(default: <out-embeddings>.skipped.jsonl)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    templates = args.template or ["a photo of a {}"]
    job = ExtractJob(
        image_root=Path(args.images),
        class_names=_read_class_names(args.class_names),
        prompt_template=templates[0],
        ensemble_templates=tuple(templates[1:]),
        encoder_id=args.encoder,
        output_embeddings=Path(args.out_embeddings),
        output_prototypes=Path(args.out_prototypes),
        batch_size=args.batch_size,
        skip_log=Path(args.skip_log) if args.skip_log else None,
    )
    try:
        result = extract(job)
    except (ExtractError, ImportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"encoded {result.num_images} images ({result.num_skipped} skipped)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
