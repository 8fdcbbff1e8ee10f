"""Dynamic image reconstruction with partition-of-unity neural fields.

Modules: geometry, phantom, pounet, operators, training, classical,
analysis, io, config and cli.
"""

__version__ = "0.1.0"
