"""
Entry point for running the CLI as a module.

Usage:
    python -m qlab.commands prep-data --config configs/toy.yaml
    python -m qlab.commands quantize --config configs/toy.yaml --method gptq --format int3
    python -m qlab.commands report --config configs/toy.yaml misalignment
"""

from qlab.commands import cli

if __name__ == "__main__":
    cli()
