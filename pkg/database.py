# database.py
import logging
from typing import Optional

from sqlalchemy import select, update
from sqlalchemy.ext.asyncio import create_async_engine, async_sessionmaker, AsyncSession

from models import Base, Run, MatrixCell

logger = logging.getLogger(__name__)

engine = None
async_session: Optional[async_sessionmaker] = None


async def init_db(url: str):
    """Binds the module engine to url and creates the tables."""
    global engine, async_session
    if engine is not None:
        await engine.dispose()
    engine = create_async_engine(url, echo=False)
    async_session = async_sessionmaker(engine, class_=AsyncSession, expire_on_commit=False)
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)


async def close_db():
    global engine, async_session
    if engine is not None:
        await engine.dispose()
    engine = None
    async_session = None


class RunDB:
    @staticmethod
    async def create(output_dir: str, config_hash: str, seed: int, robust: str) -> Run:
        async with async_session() as session:
            run = Run(output_dir=output_dir, config_hash=config_hash, seed=seed, robust=robust)
            session.add(run)
            await session.commit()
            await session.refresh(run)
            return run

    @staticmethod
    async def latest(output_dir: str, seed: int) -> Optional[Run]:
        async with async_session() as session:
            result = await session.execute(
                select(Run)
                .where(Run.output_dir == output_dir, Run.seed == seed)
                .order_by(Run.id.desc())
                .limit(1)
            )
            return result.scalar_one_or_none()


class CellDB:
    @staticmethod
    async def create(run_id: int, pair: tuple[int, int], use_filter: bool,
                     use_pcm: bool, robust: str) -> MatrixCell:
        async with async_session() as session:
            cell = MatrixCell(
                run_id=run_id,
                robot_a=pair[0],
                robot_b=pair[1],
                use_filter=use_filter,
                use_pcm=use_pcm,
                robust=robust,
                status="pending",
                report={},
            )
            session.add(cell)
            await session.commit()
            await session.refresh(cell)
            return cell

    @staticmethod
    async def save_report(cell_id: int, report: dict, status: str, elapsed_s: Optional[float] = None):
        async with async_session() as session:
            await session.execute(
                update(MatrixCell)
                .where(MatrixCell.id == cell_id)
                .values(report=report, status=status, elapsed_s=elapsed_s)
            )
            await session.commit()

    @staticmethod
    async def list_reports(run_id: int) -> list[dict]:
        """Stored cell reports of a run, pending cells excluded."""
        async with async_session() as session:
            result = await session.execute(
                select(MatrixCell)
                .where(MatrixCell.run_id == run_id, MatrixCell.status != "pending")
                .order_by(MatrixCell.id)
            )
            return [cell.report for cell in result.scalars().all()]
