from typing import List, Optional
from sqlalchemy.orm import Session
from artifacts import RunManifest
from models import RunRecord, ArtifactRecord
import logging

logger = logging.getLogger(__name__)


class RunRegistry:
    """Stores run manifests (and the files they list) in the runs database"""

    def __init__(self, db_session: Session):
        self.db = db_session

    def add_run(self, manifest: RunManifest, status: str = "completed", output_dir: Optional[str] = None,
                error: Optional[str] = None) -> RunRecord:
        """Register a finished (or failed) command"""
        try:
            kinds = manifest.notes.get("kinds", {})
            run = RunRecord(
                command=manifest.command,
                status=status,
                tool_version=manifest.tool_version,
                seed=manifest.config.get("seed"),
                output_dir=output_dir,
                config=manifest.config,
                wallclock_ms=manifest.wallclock_ms,
                total_ms=float(manifest.wallclock_ms.get("total", sum(manifest.wallclock_ms.values()))),
                error=error,
            )
            for path in manifest.file_list:
                run.artifacts.append(ArtifactRecord(path=path, kind=kinds.get(path, "output"),
                                                    sha256=manifest.files[path]))
            self.db.add(run)
            self.db.commit()
            self.db.refresh(run)
            logger.info(f"Registered {manifest.command} run {run.id} with {len(manifest.files)} files")
            return run
        except Exception as e:
            self.db.rollback()
            logger.error(f"Error registering run: {e}")
            raise

    def get_run(self, run_id: str) -> Optional[RunRecord]:
        return self.db.query(RunRecord).filter(RunRecord.id == run_id).first()

    def get_recent_runs(self, limit: int = 20, command: Optional[str] = None) -> List[RunRecord]:
        """Most recent runs first, optionally for one command"""
        query = self.db.query(RunRecord)
        if command:
            query = query.filter(RunRecord.command == command)
        return query.order_by(RunRecord.created_at.desc()).limit(limit).all()

    def find_artifact(self, sha256: str) -> List[ArtifactRecord]:
        """Every registered file with the given content hash"""
        return self.db.query(ArtifactRecord).filter(ArtifactRecord.sha256 == sha256).all()
