"""
Golden RPG - region-aware golden noise prediction at desk scale.
Copyright 2026, the Golden RPG authors.
Licensed under GNU GPL-3.0-or-later.

This file is part of Golden RPG.
Golden RPG is free software: you can redistribute it and/or modify it under
the terms of the GNU General Public License as published by the Free Software
Foundation, either version 3 of the License, or (at your option) any later
version.

Golden RPG is distributed in the hope that it will be useful, but WITHOUT ANY
WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS FOR
A PARTICULAR PURPOSE. See the GNU General Public License (COPYING.md) for more
details.
"""

import logging

from .commons import GoldenRPG

__version__ = GoldenRPG.getVersion()

logging.getLogger(__name__).addHandler(logging.NullHandler())
