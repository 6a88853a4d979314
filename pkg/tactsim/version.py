__version__ = '0.1.0'

if __name__ == '__main__':
    # print version if run directly i.e. in a CI script
    print(__version__)
