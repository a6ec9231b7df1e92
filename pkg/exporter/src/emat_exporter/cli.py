"""Batch-export command."""

import sys

import click

from . import __version__
from .errors import ExporterError
from .export import ExportJob, export


@click.command()
@click.version_option(__version__, prog_name="emat-export")
@click.argument("images", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--model", default="synthetic-vits", show_default=True,
              help="'synthetic-vits' or 'hf:<repo>'.")
@click.option("--size", default=224, show_default=True,
              help="Square resize extent; must be a multiple of the patch size.")
def main(images, out_dir, model, size):
    """Emit one token file per image from a frozen ViT backbone."""
    try:
        written = export(ExportJob(image_paths=list(images), out_dir=out_dir,
                                   model_id=model, image_size=size))
    except (ExporterError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)
    for path in written:
        click.echo(path)
    click.echo(f"{len(written)} token files written to {out_dir}")


if __name__ == "__main__":
    main()
