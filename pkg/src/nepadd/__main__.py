from nepadd.cli import main

raise SystemExit(main())
