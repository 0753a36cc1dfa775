import sys

from vizrec.cli import main

sys.exit(main())
