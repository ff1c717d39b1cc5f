"""
Run Assets Manager
Utility functions for managing experiment run directories under the run root
"""

import glob
import json
import logging
import os
import shutil
from datetime import datetime, timezone
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"


class RunAssetsManager:
    """Manager for run directories (<config_hash>-<UTC timestamp>) in the run root"""

    def __init__(self, runs_dir: Optional[str] = None):
        """
        Initialize the run assets manager

        Args:
            runs_dir: Run root; defaults to $LAPRAN_RUN_DIR or ./runs
        """
        self.runs_dir = runs_dir or os.getenv("LAPRAN_RUN_DIR", "runs")
        self.ensure_directory_exists()

    def ensure_directory_exists(self):
        """Ensure the run root exists"""
        os.makedirs(self.runs_dir, exist_ok=True)

    @staticmethod
    def new_run_id(config_hash: str, now: Optional[datetime] = None) -> str:
        """Content-addressed run id: config hash plus UTC timestamp"""
        now = now or datetime.now(timezone.utc)
        return f"{config_hash}-{now.strftime('%Y%m%dT%H%M%S%fZ')}"

    def create_run(self, config_hash: str, manifest: Dict) -> str:
        """
        Create a fresh run directory and write its run_manifest.json

        Args:
            config_hash: Hash of the experiment config
            manifest: Run manifest (config snapshot, sensing config, ...)

        Returns:
            Path of the new run directory
        """
        run_dir = os.path.join(self.runs_dir, self.new_run_id(config_hash))
        os.makedirs(run_dir, exist_ok=False)
        payload = dict(manifest)
        payload.setdefault("config_hash", config_hash)
        payload.setdefault("created", datetime.now(timezone.utc).isoformat())
        self.write_manifest(run_dir, payload)
        logger.info("Created run directory %s", run_dir)
        return run_dir

    @staticmethod
    def read_manifest(run_dir: str) -> Dict:
        path = os.path.join(run_dir, RUN_MANIFEST)
        if not os.path.exists(path):
            return {}
        with open(path, "r") as f:
            return json.load(f)

    @staticmethod
    def write_manifest(run_dir: str, manifest: Dict) -> None:
        with open(os.path.join(run_dir, RUN_MANIFEST), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    def record_stages(self, run_dir: str, stages: List[int]) -> None:
        """Add trained stage indices to the run manifest"""
        manifest = self.read_manifest(run_dir)
        manifest["stages_trained"] = sorted(set(manifest.get("stages_trained", [])) | set(stages))
        self.write_manifest(run_dir, manifest)

    def list_runs(self, config_hash: Optional[str] = None) -> List[Dict]:
        """
        List run directories, newest first

        Args:
            config_hash: Only runs of this config

        Returns:
            List of dictionaries with run information
        """
        pattern = f"{config_hash}-*" if config_hash else "*"
        runs = []
        for path in glob.glob(os.path.join(self.runs_dir, pattern)):
            if not os.path.isfile(os.path.join(path, RUN_MANIFEST)):
                continue
            manifest = self.read_manifest(path)
            runs.append({
                "run_id": os.path.basename(path),
                "path": path,
                "config_hash": manifest.get("config_hash", ""),
                "stages_trained": manifest.get("stages_trained", []),
                "size_bytes": self._directory_size(path),
                "modified": datetime.fromtimestamp(os.stat(path).st_mtime).strftime("%Y-%m-%d %H:%M:%S"),
            })

        # run ids sort chronologically within a config hash
        runs.sort(key=lambda r: (r["run_id"].split("-", 1)[-1], r["run_id"]), reverse=True)
        return runs

    def find_latest_run(self, config_hash: str) -> Optional[str]:
        """Newest run directory of a config, or None"""
        runs = self.list_runs(config_hash)
        return runs[0]["path"] if runs else None

    @staticmethod
    def stage_dir(run_dir: str, stage: int) -> str:
        return os.path.join(run_dir, f"stage{stage}")

    def trained_stages(self, run_dir: str) -> List[int]:
        """Stages with a weights.pt in the run directory"""
        stages = []
        for path in glob.glob(os.path.join(run_dir, "stage*", "weights.pt")):
            name = os.path.basename(os.path.dirname(path))[len("stage"):]
            if name.isdigit():
                stages.append(int(name))
        return sorted(stages)

    def cleanup_old_runs(self, days_old: int = 30) -> int:
        """
        Remove run directories older than a number of days

        Args:
            days_old: Remove runs older than this many days

        Returns:
            Number of removed runs
        """
        cutoff_time = datetime.now().timestamp() - (days_old * 24 * 60 * 60)
        removed_count = 0
        for run in self.list_runs():
            if os.stat(run["path"]).st_mtime < cutoff_time:
                try:
                    shutil.rmtree(run["path"])
                    removed_count += 1
                    logger.info("Removed old run: %s", run["run_id"])
                except OSError as e:
                    logger.error("Error removing %s: %s", run["run_id"], e)
        return removed_count

    @staticmethod
    def _directory_size(path: str) -> int:
        total = 0
        for root, _, files in os.walk(path):
            total += sum(os.path.getsize(os.path.join(root, name)) for name in files)
        return total

    def get_storage_usage(self) -> Dict[str, float]:
        """
        Get storage usage information for the run root

        Returns:
            Dictionary with storage usage information
        """
        runs = self.list_runs()

        total_size_bytes = sum(run["size_bytes"] for run in runs)
        total_size_mb = round(total_size_bytes / (1024 * 1024), 2)
        total_size_gb = round(total_size_mb / 1024, 2)

        return {
            "total_runs": len(runs),
            "total_size_bytes": total_size_bytes,
            "total_size_mb": total_size_mb,
            "total_size_gb": total_size_gb,
        }
