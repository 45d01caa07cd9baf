from .evalcli import main

main()
