from lcar.cli.manifest import RunManifest
from lcar.cli.storage import ingest_adjacency, ingest_dataset, ingest_prior
