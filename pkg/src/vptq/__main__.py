from vptq.cli import main

raise SystemExit(main())
