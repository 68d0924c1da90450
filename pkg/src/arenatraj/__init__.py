"""arenatraj: role- and domain-aware multi-agent trajectory completion.

A masked-trajectory CVAE for multi-agent sports sequences, with a label-aware
latent adapter and hierarchical contrastive heads, built on a small float64
reverse-mode tape.  See README.md for the CLI and file formats.
"""

__version__ = "0.1.0"
