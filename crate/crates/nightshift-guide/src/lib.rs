//! The book's chapters, attached as module documentation so that every
//! `rust` code block in `book/src/` compiles and runs under `cargo test`.
//! The crate exports nothing; it exists to keep the book honest.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub mod $name {}
    };
}

chapter!(overview, "../../../book/src/overview.md");
chapter!(engine, "../../../book/src/engine.md");
chapter!(networks, "../../../book/src/networks.md");
chapter!(objectives, "../../../book/src/objectives.md");
chapter!(training, "../../../book/src/training.md");
chapter!(cli, "../../../book/src/cli.md");
