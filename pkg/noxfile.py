import nox_poetry


@nox_poetry.session(python=["3.9", "3.10"])
def unit_tests(session):
    """Run unit tests on all supported versions of Python"""
    # Install dependencies
    session.install("poetry")
    session.run_always("poetry", "install", "--only-root", "--extras", "plot")
    session.install("pytest")

    session.run("pytest", *session.posargs)


@nox_poetry.session(python=["3.10"])
def slow_tests(session):
    """Run the statistical checks that train many models"""
    session.install("poetry")
    session.run_always("poetry", "install", "--only-root")
    session.install("pytest")

    session.run("pytest", "--runslow", "-m", "slow", *session.posargs)


@nox_poetry.session(python=["3.10"])
def requirements(session):
    """Export the locked dependencies, with hashes, to requirements.txt"""
    session.install("poetry")
    session.run("poetry", "lock", "--no-update")
    session.run(
        "poetry",
        "export",
        "--format",
        "requirements.txt",
        "--extras",
        "plot",
        "--output",
        "requirements.txt",
    )
