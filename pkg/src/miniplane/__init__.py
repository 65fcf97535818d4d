"""miniplane: a miniature distributed analytics control plane.

The controller schedules tasks onto workers either one command at a time
(per-task mode) or through cached, parameterizable task-block templates
that are installed once and then instantiated with a single message per
worker per repetition.
"""

from miniplane.commands import Command, Kind, validate_command
from miniplane.datamgr import DataManager

__all__ = ["Command", "Kind", "validate_command", "DataManager"]
__version__ = "0.1.0"
