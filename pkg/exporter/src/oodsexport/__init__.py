"""One-way bridge from a frozen backbone to `.oods` tensor files.

The scoring library consumes per-shift feature and probability maps; this
package produces them. It never scores, thresholds, or aggregates — all of
that stays downstream.
"""

from .jobs import ExportJob, ExportResult, export
from .models import resolve_model

__all__ = ["ExportJob", "ExportResult", "export", "resolve_model"]
