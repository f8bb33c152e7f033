"""Probes, report emission and the stage functions behind the CLI."""

from .probe import ProbeConfig, ProbeResult, success_probe
from .reports import ReportBundle, emit_reports
from .targeting import target_offtarget

__all__ = ["ProbeConfig", "ProbeResult", "ReportBundle", "emit_reports", "success_probe",
           "target_offtarget"]
