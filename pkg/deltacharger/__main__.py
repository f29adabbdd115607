from deltacharger.cli import main

main()
