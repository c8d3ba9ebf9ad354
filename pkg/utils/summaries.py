"""Console summary builders for command output."""

from typing import Any, Dict, Iterable, List, Optional, Tuple

from utils.time_utils import format_duration


class SummaryBuilder:
    """Factory class for the text blocks commands print on stdout."""

    # ==================== Data ====================

    @staticmethod
    def fixture(manifest_path: str, n_entries: int, n_videos: int, n_noise: int,
                elapsed: Optional[float] = None) -> str:
        lines = [
            f"Fixture: {n_entries} clip(s) from {n_videos} speaker(s)",
            f"  manifest: {manifest_path}",
        ]
        if n_noise:
            lines.append(f"  noise clips: {n_noise}")
        if elapsed is not None:
            lines.append(f"  took {format_duration(elapsed)}")
        return '\n'.join(lines)

    @staticmethod
    def tuple_preview(out_dir: str, stats: Dict[str, Dict[str, float]]) -> str:
        lines = [f"Tuple preview written to {out_dir}"]
        for role, values in stats.items():
            lines.append(f"  {role}: |M| mean {values['abs_mean']:.3f}, max {values['abs_max']:.3f}, "
                         f"clamped {100.0 * values['clamped_fraction']:.1f}%")
        return '\n'.join(lines)

    # ==================== Training ====================

    @staticmethod
    def losses(breakdown: Optional[Any]) -> str:
        if breakdown is None:
            return "n/a"
        return (f"total {breakdown.total:.4f} (mask {breakdown.mask_prediction:.4f}, "
                f"cross-modal {breakdown.cross_modal:.4f}, consistency {breakdown.consistency:.4f})")

    @staticmethod
    def training(summary: Any, elapsed: Optional[float] = None) -> str:
        lines = [
            f"Trained to step {summary.steps}",
            f"  first: {SummaryBuilder.losses(summary.first)}",
            f"  last:  {SummaryBuilder.losses(summary.last)}",
        ]
        if summary.best_val_loss is not None:
            lines.append(f"  best validation loss: {summary.best_val_loss:.4f}")
        lines.append(f"  checkpoint: {summary.checkpoint}")
        lines.append(f"  log: {summary.log_path}")
        if elapsed is not None:
            lines.append(f"  took {format_duration(elapsed)}")
        return '\n'.join(lines)

    @staticmethod
    def checks(results: Iterable[Tuple[str, bool, str]]) -> str:
        """One 'PASS name: detail' / 'FAIL name: detail' line per check."""
        return '\n'.join(f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in results)

    # ==================== Separation ====================

    @staticmethod
    def separation(clip_id: str, paths: List[Any], n_windows: int, elapsed_ms: float) -> str:
        lines = [f"{clip_id}: {len(paths)} source(s) from {n_windows} window(s) "
                 f"in {format_duration(elapsed_ms / 1000.0)}"]
        lines.extend(f"  {p}" for p in paths)
        return '\n'.join(lines)

    # ==================== Evaluation ====================

    @staticmethod
    def separation_report(report: Dict[str, Any]) -> str:
        agg = report['aggregate']
        return '\n'.join([
            f"{report['backend']} on {report['n_pairs']} pair(s), protocol {report['protocol']}",
            f"  SDR {agg['sdr']:.2f} dB  SIR {agg['sir']:.2f} dB  SAR {agg['sar']:.2f} dB  STOI {agg['stoi']:.3f}",
            f"  SDRi {agg['sdri']:.2f} dB over mixture SDR {agg['sdr_mixture']:.2f} dB",
            f"  best pairs {report['best_pairs']}, worst pairs {report['worst_pairs']}",
        ])

    @staticmethod
    def verification(report: Any) -> str:
        return (f"Verification on {report.n_pairs} pair(s): AUC {report.auc:.3f}, "
                f"EER {report.eer:.3f} (threshold {report.threshold_at_eer:.3f})")
