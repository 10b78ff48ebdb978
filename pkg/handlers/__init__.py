from merge import Router

from .descriptors import router as descriptors_router
from .clouds import router as clouds_router
from .loops import router as loops_router


def setup_routers() -> Router:
    main_router = Router("merge")
    main_router.include_router(descriptors_router)
    main_router.include_router(clouds_router)
    main_router.include_router(loops_router)
    return main_router
