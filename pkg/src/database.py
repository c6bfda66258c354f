from sqlalchemy import (
    Column,
    Integer,
    String,
    DateTime,
    ForeignKey,
    create_engine,
    Index,
    Text,
    Float,
)
from sqlalchemy.orm import (
    declarative_base,
    relationship,
    sessionmaker,
    Session,
    selectinload,
)
from datetime import datetime
from loguru import logger
from consts import DATABASE_URL
from typing import Optional, Dict, List, Any, Sequence
from models import RunSummary

Base = declarative_base()


class Run(Base):
    __tablename__ = "runs"

    id = Column(
        Integer,
        primary_key=True,
        autoincrement=True,
        doc="Unique primary key for the Run record.",
    )
    date = Column(
        DateTime,
        default=datetime.now,
        nullable=False,
        doc="Timestamp indicating when the run finished.",
    )
    command = Column(
        String, nullable=False, doc="CLI command that produced the run (e.g., 'fit-scan')."
    )
    seed = Column(Integer, nullable=True, doc="Random seed the run was started with.")
    status = Column(String, nullable=False, doc="Outcome ('ok' or the error code).")
    final_loss = Column(Float, nullable=True, doc="Best objective value reached.")
    metric_name = Column(
        String, nullable=True, doc="Name of the evaluation metric (e.g., 'nme', 'rmse')."
    )
    metric = Column(Float, nullable=True, doc="Value of the evaluation metric.")
    iterations = Column(Integer, nullable=False, default=0, doc="Optimizer iterations run.")
    wall_time = Column(Float, nullable=False, default=0.0, doc="Wall-clock seconds.")
    artifact = Column(Text, nullable=True, doc="Path of the main artifact written by the run.")

    losses = relationship(
        "LossHistory",
        back_populates="run",
        cascade="all, delete-orphan",
        order_by="LossHistory.iteration",
    )

    __table_args__ = (
        Index("idx_runs_command", command),
        Index("idx_runs_status", status),
    )

    def __repr__(self):
        return f"<Run(id={self.id}, command={self.command}, status={self.status})>"


class LossHistory(Base):
    __tablename__ = "loss_history"

    id = Column(
        Integer,
        primary_key=True,
        autoincrement=True,
        doc="Unique primary key for the LossHistory record.",
    )
    run_id = Column(
        Integer,
        ForeignKey("runs.id", ondelete="CASCADE"),
        nullable=False,
        doc="Foreign key linking to the parent Run.",
    )
    iteration = Column(Integer, nullable=False, doc="Optimizer iteration index.")
    loss = Column(Float, nullable=False, doc="Objective value at this iteration.")

    run = relationship("Run", back_populates="losses")

    __table_args__ = (Index("idx_loss_history_run", run_id),)

    def __repr__(self):
        return f"<LossHistory(run_id={self.run_id}, iteration={self.iteration}, loss={self.loss})>"


def init_database(url: str = DATABASE_URL, echo: bool = False) -> sessionmaker:
    """
    Initializes the database schema (creates all tables if they don't exist)
    and returns a session factory bound to it.
    """
    logger.info(f"Initializing database with URL={url}, echo={echo}")
    engine = create_engine(url, echo=echo)
    logger.debug("Creating all tables (if they don't exist).")
    Base.metadata.create_all(bind=engine)
    logger.info("Database schema is up-to-date. Initialization complete.")
    return sessionmaker(bind=engine, autoflush=False, autocommit=False)


def _run_to_dict(run: Run) -> Dict[str, Any]:
    return {
        "run_id": run.id,
        "date": str(run.date),
        "command": run.command,
        "seed": run.seed,
        "status": run.status,
        "final_loss": run.final_loss,
        "metric_name": run.metric_name,
        "metric": run.metric,
        "iterations": run.iterations,
        "wall_time": run.wall_time,
        "artifact": run.artifact,
    }


def put_run(
    session: Session,
    summary: RunSummary,
    seed: Optional[int] = None,
    artifact: Optional[str] = None,
) -> int:
    """
    Creates a new run record from a command summary and returns its ID.
    """
    logger.info(f"Recording run for command '{summary.command}'.")
    run = Run(
        command=summary.command,
        seed=seed,
        status=summary.status,
        final_loss=summary.final_loss,
        metric_name=summary.metric_name,
        metric=summary.metric,
        iterations=summary.iterations,
        wall_time=summary.wall_time,
        artifact=artifact,
    )
    session.add(run)
    session.commit()
    logger.debug(f"New run created with ID={run.id}")
    return run.id


def store_loss_history(session: Session, run_id: int, history: Sequence[float]) -> None:
    """Stores one LossHistory row per optimizer iteration."""
    logger.info(f"Inserting {len(history)} loss values for run {run_id}.")
    session.add_all(
        LossHistory(run_id=run_id, iteration=i, loss=float(loss)) for i, loss in enumerate(history)
    )
    session.commit()


def get_run(session: Session, run_id: int) -> Optional[Dict]:
    """
    Retrieves all information about a single run, including its loss history.
    """
    run = (
        session.query(Run)
        .options(selectinload(Run.losses))
        .filter(Run.id == run_id)
        .first()
    )
    if not run:
        return None
    run_data = _run_to_dict(run)
    run_data["losses"] = [(item.iteration, item.loss) for item in run.losses]
    return run_data


def list_runs(session: Session, command: Optional[str] = None) -> List[Dict]:
    query = session.query(Run)
    if command:
        query = query.filter(Run.command == command)
    return [_run_to_dict(run) for run in query.order_by(Run.id).all()]
