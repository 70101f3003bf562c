"""Job pipeline for turning uploaded imagery into trained radiance-field models.

Submodules:
    scheduler: penalty-based node selection.
    fleet: simulated compute nodes, cold starts, evictions and resource traces.
    storage: container/blob store with mounts.
    metadata: durable job records and the job state machine.
    orchestrator: drives jobs through the pipeline.
    simulation: scripted end-to-end runs on a virtual clock.
    api: HTTP front end.
    pcq: point-cloud geometric quality metrics.
    cli: the ``nerfpipe`` command.
"""

__version__ = "0.1.0"
