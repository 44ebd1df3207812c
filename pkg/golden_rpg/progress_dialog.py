"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.
"""

import sys
from typing import Any, Optional

from tqdm import tqdm


class ProgressDialog:
    """
    Progress of a long loop on stderr. Hidden when disabled globally (--quiet) or
    when stderr is not a terminal.
    """

    __enabled = True

    @classmethod
    def setEnabled(cls, enabled: bool):
        cls.__enabled = bool(enabled)

    @classmethod
    def isEnabled(cls) -> bool:
        return cls.__enabled and sys.stderr.isatty()

    def __init__(self, title: str, min_value: int = 0, max_value: int = 100, enabled: Optional[bool] = None) -> None:
        self.min_value = min_value
        self.value = min_value
        shown = self.isEnabled() if enabled is None else enabled
        self.bar = tqdm(total=max(0, max_value - min_value), desc=title, disable=not shown, leave=False,
                        file=sys.stderr)

    def setValue(self, value: int):
        self.bar.update(value - self.value)
        self.value = value

    def increment(self, step: int = 1):
        self.setValue(self.value + step)

    def setLabel(self, label: str):
        self.bar.set_postfix_str(label, refresh=False)

    def close(self):
        self.bar.close()

    def __enter__(self) -> "ProgressDialog":
        return self

    def __exit__(self, *exc: Any):
        self.close()
