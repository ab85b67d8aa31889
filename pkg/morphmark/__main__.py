from morphmark.main import main

main()
