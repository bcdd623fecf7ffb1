#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "instructtime/common.hpp"
#include "instructtime/rng.hpp"

using namespace instructtime;

TEST_CASE("format_real round-trips through parse_real") {
    for (Real v : {0.0, 1.0, -1.0, 0.1, 1e-5, 5e-5, 3.14159265358979, -2.5e300, 1234567.0}) {
        bool ok = false;
        CHECK(parse_real(format_real(v), ok) == v);
        CHECK(ok);
    }
}

TEST_CASE("parse helpers reject trailing garbage") {
    bool ok = true;
    parse_real("1.5x", ok);
    CHECK_FALSE(ok);
    ok = true;
    parse_int("12.5", ok);
    CHECK_FALSE(ok);
    ok = false;
    CHECK(parse_int("-42", ok) == -42);
    CHECK(ok);
}

TEST_CASE("tokenize_words splits punctuation into standalone tokens") {
    const auto toks = tokenize_words("the answer is : a, b; c.");
    const std::vector<std::string> want = {"the", "answer", "is", ":", "a", ",",
                                           "b",   ";",      "c",  "."};
    CHECK(toks == want);
    CHECK(tokenize_words("  \t\n ").empty());
}

TEST_CASE("derive_seed separates modules and seeds") {
    CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
    CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
    CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
}

TEST_CASE("hex64 renders fixed-width lowercase hex") {
    CHECK(hex64(0) == "0000000000000000");
    CHECK(hex64(0xdeadbeefULL) == "00000000deadbeef");
}

TEST_CASE("trim and split behave on edges") {
    CHECK(trim("  x \t") == "x");
    CHECK(trim("") == "");
    const auto parts = split("a||b", '|');
    CHECK(parts == std::vector<std::string>{"a", "", "b"});
}

TEST_CASE("rng is deterministic and shuffle is a permutation") {
    Rng a(42), b(42);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng r(7);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    auto orig = v;
    r.shuffle(v);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == orig);
}

TEST_CASE("normal draws have sane first moments") {
    Rng r(3);
    Real sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const Real x = r.normal(0.0, 1.0);
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}
