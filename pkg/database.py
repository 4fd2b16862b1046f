from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker, Session
from sqlalchemy.pool import StaticPool
from models import Base
from config import settings
import logging

logger = logging.getLogger(__name__)


class DatabaseManager:
    def __init__(self, url: Optional[str] = None):
        self.url = url or settings.RUNS_DATABASE_URL
        self.engine = None
        self.SessionLocal = None
        self._setup_database()

    def _setup_database(self):
        """Setup the run-registry connection and create tables"""
        try:
            if self.url.startswith("sqlite"):
                self.engine = create_engine(
                    self.url,
                    connect_args={"check_same_thread": False},
                    poolclass=StaticPool,
                )
            else:
                self.engine = create_engine(self.url)

            self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
            Base.metadata.create_all(bind=self.engine)
            logger.debug(f"Run registry ready at {self.url}")

        except Exception as e:
            logger.error(f"Run registry setup failed: {e}")
            raise

    def get_session(self) -> Session:
        """Get a new database session"""
        if not self.SessionLocal:
            raise RuntimeError("Database not initialized")
        return self.SessionLocal()

    def close_session(self, session: Session):
        """Close a database session"""
        if session:
            session.close()

    def dispose(self):
        if self.engine is not None:
            self.engine.dispose()


# Created on first use so that importing the package never touches the disk
_db_manager: Optional[DatabaseManager] = None


def get_db_manager() -> DatabaseManager:
    global _db_manager
    if _db_manager is None:
        _db_manager = DatabaseManager()
    return _db_manager


def get_db():
    """Yield a session from the shared manager and close it afterwards"""
    manager = get_db_manager()
    db = manager.get_session()
    try:
        yield db
    finally:
        manager.close_session(db)
