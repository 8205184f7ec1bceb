"""Database configuration and session management."""

import os
from functools import lru_cache

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

from .database import Base, Sweep, SweepJob

__all__ = ["Base", "Sweep", "SweepJob", "get_engine", "get_session_factory", "init_db"]


@lru_cache(maxsize=None)
def get_engine(database_url: str) -> Engine:
    """Create (once per URL) the engine, making the SQLite directory if needed."""
    if database_url.startswith("sqlite:///"):
        db_path = database_url.replace("sqlite:///", "")
        data_dir = os.path.dirname(db_path)
        if data_dir and not os.path.exists(data_dir):
            os.makedirs(data_dir, exist_ok=True)
    return create_engine(
        database_url,
        connect_args={"check_same_thread": False} if "sqlite" in database_url else {},
    )


def init_db(engine: Engine):
    """Initialize the database by creating all tables."""
    Base.metadata.create_all(bind=engine)


def get_session_factory(database_url: str) -> sessionmaker[Session]:
    engine = get_engine(database_url)
    init_db(engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)
