import argparse
import logging
import os
import sys

from .models import AdapterConfig
from .selfcheck import run_selfcheck
from .serve import AdapterServer


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="agmask-adapter",
        description="Serve vision-language encoding and promptable "
                    "segmentation over the JSON-lines adapter protocol")
    parser.add_argument("--vision", default="resnet18",
                        help="resnet18|resnet50, optionally :<state_dict.pt>")
    parser.add_argument("--segmenter", default="threshold",
                        help="threshold[:tolerance] or sam:<checkpoint>[:<type>]")
    parser.add_argument("--device",
                        default=os.environ.get("AGMASK_ADAPTER_DEVICE", "cpu"))
    parser.add_argument("--embed-dim", type=int, default=64)
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--selfcheck", action="store_true",
                        help="run diagnostics and exit")
    args = parser.parse_args(argv)

    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    config = AdapterConfig(vision=args.vision, segmenter=args.segmenter,
                           device=args.device, embed_dim=args.embed_dim,
                           image_size=args.image_size, seed=args.seed)
    if args.selfcheck:
        return run_selfcheck(config)
    AdapterServer(config).serve()
    return 0


if __name__ == "__main__":
    sys.exit(main())
