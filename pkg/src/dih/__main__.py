from dih.cli import main

main()
