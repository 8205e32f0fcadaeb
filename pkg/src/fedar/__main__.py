from fedar.cli import main

main()
