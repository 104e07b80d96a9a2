from npbml.cli import main
import sys
sys.exit(main())
