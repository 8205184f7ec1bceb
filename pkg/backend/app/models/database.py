"""Database models for the simtrain run registry."""

from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import DeclarativeBase, relationship


class Base(DeclarativeBase):
    """Base class for all database models."""

    pass


class Sweep(Base):
    """One grid search over model and training hyperparameters."""

    __tablename__ = "sweeps"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String(255), nullable=False)
    dataset = Column(String(1024), nullable=False)
    base_seed = Column(Integer, nullable=False, default=0)
    budget = Column(Integer, nullable=False)
    status = Column(String(32), nullable=False, default="running")
    started_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    finished_at = Column(DateTime, nullable=True)

    jobs = relationship(
        "SweepJob",
        back_populates="sweep",
        cascade="all, delete-orphan",
        order_by="SweepJob.job_index",
    )

    def __repr__(self):
        return f"<Sweep(name='{self.name}', jobs={len(self.jobs)})>"


class SweepJob(Base):
    """A single training job of a sweep and its outcome."""

    __tablename__ = "sweep_jobs"

    id = Column(Integer, primary_key=True, index=True)
    sweep_id = Column(Integer, ForeignKey("sweeps.id"), nullable=False)
    job_index = Column(Integer, nullable=False)
    arch = Column(String(16), nullable=False, index=True)
    strategy = Column(String(32), nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    model_params = Column(Text, nullable=False)  # JSON overrides of ModelSpec
    training_params = Column(Text, nullable=False)  # JSON overrides of TrainingConfig
    status = Column(String(16), nullable=False, default="pending")  # ok / failed
    val_nrmse = Column(Float, nullable=True)
    val_loss = Column(Float, nullable=True)
    best_epoch = Column(Integer, nullable=True)
    epochs_run = Column(Integer, nullable=True)
    checkpoint_path = Column(String(1024), nullable=True)
    error = Column(Text, nullable=True)
    seconds = Column(Float, nullable=True)

    sweep = relationship("Sweep", back_populates="jobs")

    def __repr__(self):
        return (
            f"<SweepJob(index={self.job_index}, arch='{self.arch}', "
            f"status='{self.status}')>"
        )
