//! Decision-focused microgrid operation toolkit.

pub mod ad;

#[cfg(doctest)]
mod booktest {
    //! Keeps the guide's code blocks compiling; each chapter is run as a
    //! doctest so the book cannot drift from the library.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(smoke, "../../../book/src/smoke.md");
}
