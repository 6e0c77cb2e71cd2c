#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "castlab/tensor.hpp"

using namespace castlab;

TEST_CASE("factories and shape accounting") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.size() == 6);
  CHECK(z.rows() == 2);
  CHECK(z.cols() == 3);
  for (double v : z.data) CHECK(v == 0.0);

  Tensor o = Tensor::ones({4});
  CHECK(o.ndim() == 1);
  for (double v : o.data) CHECK(v == 1.0);

  Tensor s = Tensor::scalar(2.5);
  CHECK(s.size() == 1);
  CHECK(s[0] == 2.5);

  Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK(m.at(0, 1) == 2.0);
  CHECK(m.at(1, 0) == 3.0);
  m.at(1, 1) = 9.0;
  CHECK(m[3] == 9.0);
}

TEST_CASE("shape/data mismatch rejected") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
  Tensor r = Tensor::row({1, 2, 3});
  CHECK_THROWS_AS(r.rows(), std::logic_error);
}

TEST_CASE("finiteness checks") {
  Tensor t = Tensor::row({1.0, 2.0});
  CHECK(t.all_finite());
  CHECK_NOTHROW(check_finite(t, "ok"));
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(check_finite(t, "bad"), std::runtime_error);
  t[1] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("same-shape check") {
  Tensor a = Tensor::zeros({2, 2});
  Tensor b = Tensor::zeros({2, 2});
  Tensor c = Tensor::zeros({4});
  CHECK(a.same_shape(b));
  CHECK_FALSE(a.same_shape(c));
  CHECK_THROWS_AS(check_same_shape(a, c, "x"), std::invalid_argument);
}
